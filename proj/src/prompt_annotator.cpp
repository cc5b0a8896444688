#include "moclseg/prompt_annotator.hpp"

#include <algorithm>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "moclseg/adapter_model.hpp"

namespace moclseg {

namespace {

void check_box_in_bounds(const cv::Mat& image, const BoxAnnotation& b) {
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > image.cols || b.y1 > image.rows || b.x0 >= b.x1 ||
        b.y0 >= b.y1) {
        std::ostringstream os;
        os << "box [" << b.x0 << "," << b.y0 << "," << b.x1 << "," << b.y1
           << "] outside image bounds " << image.cols << "x" << image.rows;
        throw ValidationError(os.str());
    }
}

} // namespace

cv::Mat BuiltinBackend::segment(const cv::Mat& image, const BoxAnnotation& box) const {
    check_box_in_bounds(image, box);
    if (box.area() < 4) throw ValidationError("box area below 4 px");
    cv::Mat full = cv::Mat::zeros(image.size(), CV_8UC1);

    cv::Rect roi(box.x0, box.y0, box.width(), box.height());
    cv::Mat gray;
    cv::cvtColor(image(roi), gray, cv::COLOR_BGR2GRAY);

    double mn, mx;
    cv::minMaxLoc(gray, &mn, &mx);
    if (mn == mx) return full; // uniform box, nothing to separate

    cv::Mat bin;
    cv::threshold(gray, bin, 0, 255, cv::THRESH_BINARY | cv::THRESH_OTSU);

    // border-ring heuristic: the partition whose mean differs most from the
    // box border is foreground
    double border_sum = 0;
    int border_n = 0;
    for (int x = 0; x < gray.cols; ++x) {
        border_sum += gray.at<uint8_t>(0, x) + gray.at<uint8_t>(gray.rows - 1, x);
        border_n += 2;
    }
    for (int y = 1; y < gray.rows - 1; ++y) {
        border_sum += gray.at<uint8_t>(y, 0) + gray.at<uint8_t>(y, gray.cols - 1);
        border_n += 2;
    }
    double border_mean = border_sum / border_n;
    double mean_hi = cv::mean(gray, bin)[0];
    double mean_lo = cv::mean(gray, 255 - bin)[0];
    cv::Mat fg = (std::abs(mean_hi - border_mean) >= std::abs(mean_lo - border_mean))
                     ? bin
                     : (255 - bin);

    cv::Mat labels, stats, centroids;
    int n = cv::connectedComponentsWithStats(fg, labels, stats, centroids, 8, CV_32S);
    if (n <= 1) return full;
    int best = 1;
    for (int lb = 2; lb < n; ++lb)
        if (stats.at<int>(lb, cv::CC_STAT_AREA) > stats.at<int>(best, cv::CC_STAT_AREA)) best = lb;
    cv::Mat comp = (labels == best); // 0/255

    cv::Mat kernel = cv::getStructuringElement(cv::MORPH_RECT, cv::Size(3, 3));
    cv::morphologyEx(comp, comp, cv::MORPH_CLOSE, kernel);

    comp /= 255;
    comp.copyTo(full(roi));
    return full;
}

std::shared_ptr<PromptableBackend> make_builtin_backend() {
    return std::make_shared<BuiltinBackend>();
}

namespace {

// Prompt-free model checkpoint reused as a promptable backend; the predicted
// class probability is thresholded and masked to the prompting box.
class CheckpointBackend : public PromptableBackend {
public:
    CheckpointBackend(AdapterModel model, BackendConfig config)
        : model_(std::move(model)), config_(config) {}

    std::string name() const override { return "checkpoint"; }

    cv::Mat segment(const cv::Mat& image, const BoxAnnotation& box) const override {
        check_box_in_bounds(image, box);
        auto probs = model_.predict_tiled(image);
        // union of class channels: a prompt names a location, not a class
        cv::Mat best = probs[0].clone();
        for (size_t c = 1; c < probs.size(); ++c) best = cv::max(best, probs[c]);
        cv::Mat bin = best > config_.prob_threshold;
        bin /= 255;
        cv::Mat out = cv::Mat::zeros(image.size(), CV_8UC1);
        cv::Rect roi(box.x0, box.y0, box.width(), box.height());
        bin(roi).copyTo(out(roi));
        // keep the component nearest the box center, as a prompt selects one
        // instance
        cv::Mat labels;
        int n = cv::connectedComponents(out, labels, 8, CV_32S);
        if (n <= 1) return out;
        cv::Point center(box.x0 + box.width() / 2, box.y0 + box.height() / 2);
        int keep = labels.at<int>(center);
        if (keep == 0) {
            // fall back to the largest component in the box
            std::vector<int> area(static_cast<size_t>(n), 0);
            for (int y = box.y0; y < box.y1; ++y)
                for (int x = box.x0; x < box.x1; ++x) area[static_cast<size_t>(labels.at<int>(y, x))]++;
            keep = 1;
            for (int lb = 2; lb < n; ++lb)
                if (area[static_cast<size_t>(lb)] > area[static_cast<size_t>(keep)]) keep = lb;
        }
        cv::Mat result = (labels == keep);
        result /= 255;
        return result;
    }

private:
    AdapterModel model_;
    BackendConfig config_;
};

} // namespace

std::shared_ptr<PromptableBackend> load_checkpoint_backend(const fs::path& checkpoint,
                                                           const BackendConfig& config) {
    if (!fs::exists(checkpoint))
        throw IoError("checkpoint not found: " + checkpoint.string());
    AdapterModel model = AdapterModel::load(checkpoint);
    return std::make_shared<CheckpointBackend>(std::move(model), config);
}

PixelAnnotation segment_boxes(const cv::Mat& image, const std::vector<BoxAnnotation>& boxes,
                              const PromptableBackend& backend) {
    PixelAnnotation ann;
    ann.instance_map = cv::Mat::zeros(image.size(), CV_32S);
    if (boxes.empty()) return ann;

    for (const auto& b : boxes) check_box_in_bounds(image, b);

    struct Pending {
        cv::Mat mask;
        int area = 0;
        const BoxAnnotation* box = nullptr;
    };
    std::vector<Pending> pend;
    for (const auto& b : boxes) {
        Pending p;
        p.mask = backend.segment(image, b);
        p.area = cv::countNonZero(p.mask);
        p.box = &b;
        pend.push_back(std::move(p));
    }

    // contested pixels go to the smaller instance; lower id wins ties
    std::vector<int> order(pend.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return pend[static_cast<size_t>(a)].area > pend[static_cast<size_t>(b)].area;
    });

    // paint larger instances first, then smaller on top; empty outputs dropped
    std::vector<int> id_of(pend.size(), 0);
    int next_id = 1;
    for (size_t i = 0; i < pend.size(); ++i)
        if (pend[i].area > 0) id_of[i] = next_id++;

    for (int oi : order) {
        const Pending& p = pend[static_cast<size_t>(oi)];
        if (p.area == 0) continue;
        ann.instance_map.setTo(id_of[static_cast<size_t>(oi)], p.mask);
    }
    // larger painted earlier could still have won ties with an equal-area later
    // instance; repaint equal-area contested pixels to the lower id
    for (size_t i = 0; i < pend.size(); ++i) {
        if (pend[i].area == 0) continue;
        for (size_t j = i + 1; j < pend.size(); ++j) {
            if (pend[j].area != pend[i].area) continue;
            cv::Mat contested = pend[i].mask & pend[j].mask;
            if (cv::countNonZero(contested) > 0)
                ann.instance_map.setTo(id_of[i], contested);
        }
    }

    // compact ids: dropped instances leave no gaps
    for (size_t i = 0; i < pend.size(); ++i) {
        InstanceProvenance prov;
        prov.box = *pend[i].box;
        prov.dropped = pend[i].area == 0;
        prov.instance_id = prov.dropped ? 0 : id_of[i];
        ann.provenance.push_back(prov);
        if (!prov.dropped) ann.instance_classes.push_back(pend[i].box->class_name);
    }

    // instances that lost every pixel to overlap resolution stay in the map
    // domain but may be empty; class masks are unions over surviving pixels
    for (size_t i = 0; i < pend.size(); ++i) {
        if (pend[i].area == 0) continue;
        const std::string& cls = pend[i].box->class_name;
        if (!ann.class_masks.count(cls))
            ann.class_masks[cls] = cv::Mat::zeros(image.size(), CV_8UC1);
        cv::Mat mine = (ann.instance_map == id_of[i]);
        mine /= 255;
        ann.class_masks[cls] |= mine;
    }
    return ann;
}

} // namespace moclseg
