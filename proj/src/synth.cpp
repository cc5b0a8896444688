#include "moclseg/pipeline.hpp"

#include <fstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace moclseg {

using json = nlohmann::json;

namespace {

struct Nucleus {
    int cx, cy, ax, ay;
    double angle;
};

// per-class chromatic signatures (BGR), nuclei on a pale stained background
const cv::Vec3b kClassColors[] = {
    {110, 40, 90},   // dark purple
    {140, 120, 40},  // teal-blue
    {60, 60, 160},   // brick red
    {60, 130, 60},   // green
};

void render_nucleus(cv::Mat& img, cv::Mat& mask, const Nucleus& n, cv::Vec3b color, Rng& rng) {
    cv::ellipse(mask, cv::Point(n.cx, n.cy), cv::Size(n.ax, n.ay), n.angle, 0, 360, 255, -1);
    cv::Mat local = cv::Mat::zeros(img.size(), CV_8UC1);
    cv::ellipse(local, cv::Point(n.cx, n.cy), cv::Size(n.ax, n.ay), n.angle, 0, 360, 255, -1);
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            if (!local.at<uint8_t>(y, x)) continue;
            // chromatin-like texture: per-pixel brightness jitter
            double j = rng.next_uniform(-28.0, 28.0);
            cv::Vec3b& px = img.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c)
                px[c] = cv::saturate_cast<uint8_t>(color[c] + j);
        }
}

} // namespace

DatasetManifest generate_synthetic_dataset(const fs::path& out_dir, const SynthConfig& cfg) {
    if (cfg.n_patches < 1) throw ValidationError("synth: n_patches must be >= 1");
    if (cfg.classes.empty()) throw ValidationError("synth: at least one class required");
    if (cfg.classes.size() > std::size(kClassColors))
        throw ValidationError("synth: too many classes for the color palette");

    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "boxes");
    for (const auto& cls : cfg.classes) {
        fs::create_directories(out_dir / "masks" / cls);
        fs::create_directories(out_dir / "if" / cls);
    }

    json manifest;
    manifest["samples"] = json::array();

    int s = cfg.patch_size;
    for (int pi = 0; pi < cfg.n_patches; ++pi) {
        Rng rng(cfg.seed * 1000003ull + static_cast<uint64_t>(pi));
        std::string id = "patch_" + std::to_string(pi);

        // textured pale background
        cv::Mat img(s, s, CV_8UC3);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double j = rng.next_uniform(-14.0, 14.0);
                img.at<cv::Vec3b>(y, x) =
                    cv::Vec3b(cv::saturate_cast<uint8_t>(225 + j), cv::saturate_cast<uint8_t>(205 + j),
                              cv::saturate_cast<uint8_t>(230 + j));
            }

        std::vector<cv::Mat> masks;
        std::vector<Nucleus> placed;
        std::vector<BoxAnnotation> boxes;
        for (size_t ci = 0; ci < cfg.classes.size(); ++ci) {
            cv::Mat mask = cv::Mat::zeros(s, s, CV_8UC1);
            int count = rng.next_int(3, 6);
            for (int k = 0; k < count; ++k) {
                // rejection sampling keeps instances disjoint across classes
                for (int attempt = 0; attempt < 40; ++attempt) {
                    Nucleus n;
                    n.ax = rng.next_int(7, 14);
                    n.ay = rng.next_int(7, 14);
                    int margin = std::max(n.ax, n.ay) + 3;
                    n.cx = rng.next_int(margin, s - 1 - margin);
                    n.cy = rng.next_int(margin, s - 1 - margin);
                    n.angle = rng.next_uniform(0.0, 180.0);
                    bool clash = false;
                    for (const auto& o : placed) {
                        int dx = n.cx - o.cx, dy = n.cy - o.cy;
                        int rr = std::max(n.ax, n.ay) + std::max(o.ax, o.ay) + 3;
                        if (dx * dx + dy * dy < rr * rr) {
                            clash = true;
                            break;
                        }
                    }
                    if (clash) continue;
                    render_nucleus(img, mask, n, kClassColors[ci], rng);
                    placed.push_back(n);
                    // tight box of the rendered ellipse
                    cv::Mat one = cv::Mat::zeros(s, s, CV_8UC1);
                    cv::ellipse(one, cv::Point(n.cx, n.cy), cv::Size(n.ax, n.ay), n.angle, 0, 360,
                                255, -1);
                    cv::Rect r = cv::boundingRect(one);
                    BoxAnnotation b;
                    b.class_name = cfg.classes[ci];
                    b.x0 = r.x;
                    b.y0 = r.y;
                    b.x1 = r.x + r.width;
                    b.y1 = r.y + r.height;
                    b.source = BoxSource::tight;
                    boxes.push_back(b);
                    break;
                }
            }
            mask /= 255;
            masks.push_back(mask);
        }

        // IF channels: bright where the class's nuclei lie, dim speckle noise
        // elsewhere, cleanly separated by the declared threshold
        std::vector<cv::Mat> ifs;
        for (size_t ci = 0; ci < cfg.classes.size(); ++ci) {
            cv::Mat ifc(s, s, CV_8UC1);
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    if (masks[ci].at<uint8_t>(y, x))
                        ifc.at<uint8_t>(y, x) =
                            cv::saturate_cast<uint8_t>(205 + rng.next_uniform(0.0, 45.0));
                    else
                        ifc.at<uint8_t>(y, x) =
                            cv::saturate_cast<uint8_t>(rng.next_uniform(0.0, 80.0));
                }
            ifs.push_back(ifc);
        }

        cv::imwrite((out_dir / "images" / (id + ".png")).string(), img);
        for (size_t ci = 0; ci < cfg.classes.size(); ++ci) {
            write_mask_png(out_dir / "masks" / cfg.classes[ci] / (id + ".png"), masks[ci]);
            cv::imwrite((out_dir / "if" / cfg.classes[ci] / (id + ".png")).string(), ifs[ci]);
        }
        write_boxes_jsonl(out_dir / "boxes" / (id + ".jsonl"), boxes);

        json js;
        js["id"] = id;
        js["image_path"] = "images/" + id + ".png";
        js["stratum"] = (pi % 4 == 3) ? "injured" : "normal";
        js["box_path"] = "boxes/" + id + ".jsonl";
        json jm = json::object(), jf = json::object(), jt = json::object();
        for (const auto& cls : cfg.classes) {
            jm[cls] = "masks/" + cls + "/" + id + ".png";
            jf[cls] = "if/" + cls + "/" + id + ".png";
            jt[cls] = cfg.if_threshold;
        }
        js["mask_paths"] = jm;
        js["if_paths"] = jf;
        js["if_thresholds"] = jt;
        manifest["samples"].push_back(js);
    }

    {
        std::ofstream out(out_dir / "manifest.json");
        if (!out) throw IoError("cannot write manifest in " + out_dir.string());
        out << manifest.dump(2) << "\n";
    }
    return load_manifest(out_dir, out_dir / "manifest.json");
}

} // namespace moclseg
