#include "moclseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

namespace moclseg {

using json = nlohmann::json;

namespace {

void check_same_shape(const cv::Mat& a, const cv::Mat& b) {
    if (a.size() != b.size()) throw ValidationError("metric inputs: shape mismatch");
}

struct Overlap {
    int64_t inter = 0, pa = 0, pb = 0;
};

Overlap overlap(const cv::Mat& pred, const cv::Mat& gt) {
    Overlap o;
    for (int y = 0; y < pred.rows; ++y)
        for (int x = 0; x < pred.cols; ++x) {
            bool p = pred.at<uint8_t>(y, x) != 0, g = gt.at<uint8_t>(y, x) != 0;
            o.inter += p && g;
            o.pa += p;
            o.pb += g;
        }
    return o;
}

} // namespace

double dice(const cv::Mat& pred, const cv::Mat& gt) {
    check_same_shape(pred, gt);
    Overlap o = overlap(pred, gt);
    if (o.pa + o.pb == 0) return 1.0;
    return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.pa + o.pb);
}

double iou(const cv::Mat& pred, const cv::Mat& gt) {
    check_same_shape(pred, gt);
    Overlap o = overlap(pred, gt);
    int64_t uni = o.pa + o.pb - o.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.inter) / static_cast<double>(uni);
}

cv::Mat instances_from_prob(const cv::Mat& prob, double threshold, int min_size, bool fill_holes) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ValidationError("instances_from_prob: threshold must be in (0,1)");
    cv::Mat bin = prob > threshold;

    cv::Mat labels, stats, centroids;
    int n = cv::connectedComponentsWithStats(bin, labels, stats, centroids, 8, CV_32S);

    // drop small components, fill interior holes, relabel consecutively in
    // row-major discovery order (connectedComponents already labels that way)
    cv::Mat out = cv::Mat::zeros(prob.size(), CV_32S);
    int next = 1;
    for (int lb = 1; lb < n; ++lb) {
        if (stats.at<int>(lb, cv::CC_STAT_AREA) < min_size) continue;
        cv::Mat comp = (labels == lb); // 0/255
        if (fill_holes) {
            // holes = background components of the complement not touching the
            // component's bounding border
            cv::Rect roi(stats.at<int>(lb, cv::CC_STAT_LEFT), stats.at<int>(lb, cv::CC_STAT_TOP),
                         stats.at<int>(lb, cv::CC_STAT_WIDTH), stats.at<int>(lb, cv::CC_STAT_HEIGHT));
            cv::Mat sub = comp(roi).clone();
            cv::Mat inv = 255 - sub;
            cv::Mat hl;
            int hn = cv::connectedComponents(inv, hl, 4, CV_32S);
            std::vector<bool> touches(static_cast<size_t>(hn), false);
            for (int x = 0; x < sub.cols; ++x) {
                touches[static_cast<size_t>(hl.at<int>(0, x))] = true;
                touches[static_cast<size_t>(hl.at<int>(sub.rows - 1, x))] = true;
            }
            for (int y = 0; y < sub.rows; ++y) {
                touches[static_cast<size_t>(hl.at<int>(y, 0))] = true;
                touches[static_cast<size_t>(hl.at<int>(y, sub.cols - 1))] = true;
            }
            for (int y = 0; y < sub.rows; ++y)
                for (int x = 0; x < sub.cols; ++x) {
                    int h = hl.at<int>(y, x);
                    if (h > 0 && !touches[static_cast<size_t>(h)]) sub.at<uint8_t>(y, x) = 255;
                }
            sub.copyTo(comp(roi));
        }
        out.setTo(next, comp);
        ++next;
    }
    return out;
}

namespace {

struct InstancePixels {
    std::map<int, std::vector<int64_t>> by_label; // label -> flat pixel indices
};

InstancePixels collect(const cv::Mat& labels) {
    InstancePixels ip;
    for (int y = 0; y < labels.rows; ++y)
        for (int x = 0; x < labels.cols; ++x) {
            int lb = labels.at<int>(y, x);
            if (lb > 0) ip.by_label[lb].push_back(static_cast<int64_t>(y) * labels.cols + x);
        }
    return ip;
}

int64_t intersection_size(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    // pixel lists are produced in ascending order
    int64_t n = 0;
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() && ib != b.end()) {
        if (*ia < *ib)
            ++ia;
        else if (*ib < *ia)
            ++ib;
        else {
            ++n;
            ++ia;
            ++ib;
        }
    }
    return n;
}

} // namespace

double aji(const cv::Mat& pred_labels, const cv::Mat& gt_labels) {
    check_same_shape(pred_labels, gt_labels);
    InstancePixels gp = collect(gt_labels);
    InstancePixels pp = collect(pred_labels);
    if (gp.by_label.empty() && pp.by_label.empty()) return 1.0;
    if (gp.by_label.empty() || pp.by_label.empty()) return 0.0;

    int64_t c_sum = 0, u_sum = 0;
    std::map<int, int64_t> pred_use; // matched predictions (may match repeatedly per Kumar)
    for (const auto& [glb, gpix] : gp.by_label) {
        double best_iou = -1.0;
        int best_p = 0;
        int64_t best_i = 0, best_u = 0;
        for (const auto& [plb, ppix] : pp.by_label) {
            int64_t inter = intersection_size(gpix, ppix);
            int64_t uni = static_cast<int64_t>(gpix.size() + ppix.size()) - inter;
            double v = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
            if (v > best_iou) {
                best_iou = v;
                best_p = plb;
                best_i = inter;
                best_u = uni;
            }
        }
        c_sum += best_i;
        u_sum += best_u;
        pred_use[best_p]++;
    }
    for (const auto& [plb, ppix] : pp.by_label)
        if (!pred_use.count(plb)) u_sum += static_cast<int64_t>(ppix.size());
    if (u_sum == 0) return 0.0;
    return static_cast<double>(c_sum) / static_cast<double>(u_sum);
}

InstanceF1 instance_f1(const cv::Mat& pred_labels, const cv::Mat& gt_labels, double iou_thresh) {
    check_same_shape(pred_labels, gt_labels);
    if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
        throw ValidationError("instance_f1: iou_thresh must be in (0,1)");
    InstancePixels gp = collect(gt_labels);
    InstancePixels pp = collect(pred_labels);

    struct Pair {
        double iou;
        int g, p;
    };
    std::vector<Pair> pairs;
    for (const auto& [glb, gpix] : gp.by_label)
        for (const auto& [plb, ppix] : pp.by_label) {
            int64_t inter = intersection_size(gpix, ppix);
            if (inter == 0) continue;
            int64_t uni = static_cast<int64_t>(gpix.size() + ppix.size()) - inter;
            double v = static_cast<double>(inter) / static_cast<double>(uni);
            if (v >= iou_thresh) pairs.push_back({v, glb, plb});
        }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const Pair& a, const Pair& b) { return a.iou > b.iou; });

    std::map<int, bool> g_used, p_used;
    int tp = 0;
    for (const auto& pr : pairs) {
        if (g_used[pr.g] || p_used[pr.p]) continue;
        g_used[pr.g] = p_used[pr.p] = true;
        ++tp;
    }
    InstanceF1 out;
    out.tp = tp;
    out.fp = static_cast<int>(pp.by_label.size()) - tp;
    out.fn = static_cast<int>(gp.by_label.size()) - tp;
    out.precision = pp.by_label.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(pp.by_label.size());
    out.recall = gp.by_label.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gp.by_label.size());
    int denom = 2 * tp + out.fp + out.fn;
    out.f1 = denom == 0 ? 1.0 : 2.0 * tp / static_cast<double>(denom);
    return out;
}

double pixel_auc(const cv::Mat& prob, const cv::Mat& gt) {
    check_same_shape(prob, gt);
    std::vector<std::pair<float, uint8_t>> v;
    v.reserve(static_cast<size_t>(prob.total()));
    int64_t n_pos = 0;
    for (int y = 0; y < prob.rows; ++y)
        for (int x = 0; x < prob.cols; ++x) {
            uint8_t g = gt.at<uint8_t>(y, x) ? 1 : 0;
            n_pos += g;
            v.emplace_back(prob.at<float>(y, x), g);
        }
    int64_t n = static_cast<int64_t>(v.size());
    int64_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw ValidationError("pixel_auc: ground truth contains a single class");

    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    // average ranks over ties
    double rank_sum_pos = 0.0;
    int64_t i = 0;
    while (i < n) {
        int64_t j = i;
        while (j < n && v[static_cast<size_t>(j)].first == v[static_cast<size_t>(i)].first) ++j;
        double avg_rank = 0.5 * static_cast<double>(i + 1 + j); // ranks are 1-based
        for (int64_t k = i; k < j; ++k)
            if (v[static_cast<size_t>(k)].second) rank_sum_pos += avg_rank;
        i = j;
    }
    double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

BestF1 best_f1(const cv::Mat& prob, const cv::Mat& gt, double step) {
    check_same_shape(prob, gt);
    if (!(step > 0.0 && step < 1.0)) throw ValidationError("best_f1: step must be in (0,1)");
    int64_t n_pos = 0;
    for (int y = 0; y < gt.rows; ++y)
        for (int x = 0; x < gt.cols; ++x) n_pos += gt.at<uint8_t>(y, x) ? 1 : 0;
    BestF1 out;
    out.threshold = step;
    if (n_pos == 0) return out; // empty ground truth: 0.0 by convention

    for (int ti = 1; step * ti < 1.0 - step / 2.0; ++ti) {
        double t = step * ti;
        int64_t tp = 0, fp = 0, fn = 0;
        for (int y = 0; y < gt.rows; ++y)
            for (int x = 0; x < gt.cols; ++x) {
                bool p = prob.at<float>(y, x) >= t;
                bool g = gt.at<uint8_t>(y, x) != 0;
                tp += p && g;
                fp += p && !g;
                fn += !p && g;
            }
        double f1 = (2 * tp + fp + fn) == 0 ? 1.0
                                            : 2.0 * static_cast<double>(tp) /
                                                  static_cast<double>(2 * tp + fp + fn);
        if (f1 > out.f1) {
            out.f1 = f1;
            out.threshold = t;
        }
    }
    return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    WilcoxonMode mode) {
    if (a.size() != b.size() || a.empty())
        throw ValidationError("wilcoxon: paired samples of equal nonzero length required");
    std::vector<double> d;
    for (size_t i = 0; i < a.size(); ++i) {
        double di = a[i] - b[i];
        if (di != 0.0) d.push_back(di);
    }
    if (d.empty()) throw ValidationError("wilcoxon: degenerate sample (all differences zero)");
    int n = static_cast<int>(d.size());

    // average ranks of |d|
    std::vector<int> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](int x, int y) { return std::abs(d[static_cast<size_t>(x)]) < std::abs(d[static_cast<size_t>(y)]); });
    std::vector<double> ranks(d.size());
    size_t i = 0;
    double tie_correction = 0.0;
    while (i < idx.size()) {
        size_t j = i;
        while (j < idx.size() && std::abs(d[static_cast<size_t>(idx[j])]) == std::abs(d[static_cast<size_t>(idx[i])])) ++j;
        double avg = 0.5 * static_cast<double>(i + 1 + j);
        double t = static_cast<double>(j - i);
        tie_correction += t * t * t - t;
        for (size_t k = i; k < j; ++k) ranks[static_cast<size_t>(idx[k])] = avg;
        i = j;
    }

    double w_plus = 0.0, w_minus = 0.0;
    for (size_t k = 0; k < d.size(); ++k)
        (d[k] > 0 ? w_plus : w_minus) += ranks[k];
    double stat = std::min(w_plus, w_minus);

    bool use_exact = mode == WilcoxonMode::exact || (mode == WilcoxonMode::automatic && n <= 25);
    WilcoxonResult out;
    out.statistic = stat;
    out.n_used = n;
    out.exact = use_exact;

    if (use_exact) {
        // enumerate all 2^n sign assignments; two-sided p = P(min(W+,W-) <= stat)
        if (n > 30) throw ValidationError("wilcoxon: exact mode limited to n <= 30");
        uint64_t total = 1ull << n;
        double sum_ranks = std::accumulate(ranks.begin(), ranks.end(), 0.0);
        uint64_t count = 0;
        const double tol = 1e-9;
        for (uint64_t m = 0; m < total; ++m) {
            double wp = 0.0;
            for (int bit = 0; bit < n; ++bit)
                if (m & (1ull << bit)) wp += ranks[static_cast<size_t>(bit)];
            double wm = sum_ranks - wp;
            if (std::min(wp, wm) <= stat + tol) ++count;
        }
        out.p_two_sided = static_cast<double>(count) / static_cast<double>(total);
        out.p_two_sided = std::min(1.0, out.p_two_sided);
    } else {
        double mu = static_cast<double>(n) * (n + 1) / 4.0;
        double var = static_cast<double>(n) * (n + 1) * (2 * n + 1) / 24.0 - tie_correction / 48.0;
        if (var <= 0.0) throw ValidationError("wilcoxon: zero variance");
        // continuity correction toward the mean
        double z = (stat - mu + 0.5) / std::sqrt(var);
        double p_one = 0.5 * std::erfc(-z / std::sqrt(2.0));
        out.p_two_sided = std::min(1.0, 2.0 * p_one);
    }
    return out;
}

void MetricsReport::finalize() {
    std::map<std::string, std::vector<double>> by_metric;
    for (const auto& [img, mm] : per_image)
        for (const auto& [name, v] : mm) by_metric[name].push_back(v);
    aggregate.clear();
    for (const auto& [name, vals] : by_metric) {
        double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= static_cast<double>(vals.size());
        aggregate[name] = {mean, std::sqrt(var)};
    }
}

std::string MetricsReport::to_json() const {
    json j;
    j["per_image"] = json::object();
    for (const auto& [img, mm] : per_image) {
        json m = json::object();
        for (const auto& [name, v] : mm) m[name] = v;
        j["per_image"][img] = m;
    }
    j["aggregate"] = json::object();
    for (const auto& [name, ms] : aggregate)
        j["aggregate"][name] = {{"mean", ms.first}, {"std", ms.second}};
    j["comparisons"] = json::array();
    for (const auto& c : comparisons)
        j["comparisons"].push_back({{"method_a", c.method_a},
                                    {"method_b", c.method_b},
                                    {"metric", c.metric},
                                    {"p_value", c.p_value}});
    return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
    json j = json::parse(text);
    MetricsReport r;
    for (auto& [img, mm] : j.at("per_image").items())
        for (auto& [name, v] : mm.items()) r.per_image[img][name] = v.get<double>();
    if (j.contains("aggregate"))
        for (auto& [name, ms] : j["aggregate"].items())
            r.aggregate[name] = {ms.at("mean").get<double>(), ms.at("std").get<double>()};
    if (j.contains("comparisons"))
        for (auto& c : j["comparisons"])
            r.comparisons.push_back({c.at("method_a"), c.at("method_b"), c.at("metric"),
                                     c.at("p_value")});
    return r;
}

} // namespace moclseg
