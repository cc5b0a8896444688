#include "moclseg/data_ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace moclseg {

using json = nlohmann::json;

std::string to_hex(uint64_t v) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string stratum_name(Stratum s) {
    switch (s) {
        case Stratum::normal: return "normal";
        case Stratum::injured: return "injured";
        default: return "unknown";
    }
}

Stratum stratum_from_name(const std::string& s) {
    if (s == "normal") return Stratum::normal;
    if (s == "injured") return Stratum::injured;
    if (s == "unknown" || s.empty()) return Stratum::unknown;
    throw ValidationError("unknown stratum: " + s);
}

std::string box_source_name(BoxSource s) {
    switch (s) {
        case BoxSource::tight: return "tight";
        case BoxSource::random: return "random";
        default: return "human";
    }
}

BoxSource box_source_from_name(const std::string& s) {
    if (s == "tight") return BoxSource::tight;
    if (s == "random") return BoxSource::random;
    if (s == "human") return BoxSource::human;
    throw ValidationError("unknown box source: " + s);
}

const SampleRecord& DatasetManifest::record(const std::string& id) const {
    for (const auto& s : samples)
        if (s.id == id) return s;
    throw ValidationError("sample id not in manifest: " + id);
}

namespace {

cv::Size probe_image_size(const fs::path& p, const std::string& sample_id) {
    cv::Mat m = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
    if (m.empty())
        throw ValidationError("sample '" + sample_id + "': cannot read image " + p.string());
    return m.size();
}

} // namespace

DatasetManifest load_manifest(const fs::path& root, const fs::path& manifest_file) {
    std::ifstream in(manifest_file);
    if (!in) throw IoError("cannot open manifest: " + manifest_file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("manifest parse error: " + std::string(e.what()));
    }

    DatasetManifest m;
    m.root_path = root;
    std::set<std::string> ids;
    std::set<std::string> classes;
    for (const auto& js : j.at("samples")) {
        SampleRecord r;
        r.id = js.at("id").get<std::string>();
        if (!ids.insert(r.id).second)
            throw ValidationError("duplicate sample id: " + r.id);
        r.image_path = root / js.at("image_path").get<std::string>();
        if (js.contains("if_paths"))
            for (auto& [k, v] : js["if_paths"].items())
                r.if_paths[k] = root / v.get<std::string>();
        if (js.contains("mask_paths"))
            for (auto& [k, v] : js["mask_paths"].items()) {
                r.mask_paths[k] = root / v.get<std::string>();
                classes.insert(k);
            }
        if (js.contains("box_path")) r.box_path = root / js["box_path"].get<std::string>();
        if (js.contains("stratum")) r.stratum = stratum_from_name(js["stratum"].get<std::string>());
        if (js.contains("if_thresholds"))
            for (auto& [k, v] : js["if_thresholds"].items()) r.if_thresholds[k] = v.get<double>();
        m.samples.push_back(std::move(r));
    }
    m.class_names.assign(classes.begin(), classes.end());

    // validate: paths exist, spatial sizes consistent per sample
    for (const auto& r : m.samples) {
        if (!fs::exists(r.image_path))
            throw ValidationError("sample '" + r.id + "': missing image " + r.image_path.string());
        cv::Size base = probe_image_size(r.image_path, r.id);
        auto check_one = [&](const fs::path& p) {
            if (!fs::exists(p))
                throw ValidationError("sample '" + r.id + "': missing file " + p.string());
            if (probe_image_size(p, r.id) != base)
                throw ValidationError("sample '" + r.id + "': shape mismatch in " + p.string());
        };
        for (const auto& [_, p] : r.if_paths) check_one(p);
        for (const auto& [_, p] : r.mask_paths) check_one(p);
        if (r.box_path && !fs::exists(*r.box_path))
            throw ValidationError("sample '" + r.id + "': missing boxes " + r.box_path->string());
    }
    return m;
}

PatchSample load_sample(const DatasetManifest&, const SampleRecord& rec) {
    PatchSample s;
    s.image = cv::imread(rec.image_path.string(), cv::IMREAD_COLOR);
    if (s.image.empty()) throw IoError("cannot read " + rec.image_path.string());
    for (const auto& [cls, p] : rec.if_paths) {
        cv::Mat ch = cv::imread(p.string(), cv::IMREAD_GRAYSCALE);
        if (ch.empty()) throw IoError("cannot read " + p.string());
        s.if_channels[cls] = ch;
    }
    for (const auto& [cls, p] : rec.mask_paths) s.class_masks[cls] = read_mask_png(p);
    if (rec.box_path) s.boxes = read_boxes_jsonl(*rec.box_path);
    s.stratum = rec.stratum;
    return s;
}

namespace {

// floor per split, remainder to train
std::array<size_t, 3> split_sizes(size_t n, std::array<int, 3> ratios) {
    int total = ratios[0] + ratios[1] + ratios[2];
    std::array<size_t, 3> sz{};
    for (int i = 0; i < 3; ++i) sz[static_cast<size_t>(i)] = n * static_cast<size_t>(ratios[static_cast<size_t>(i)]) / static_cast<size_t>(total);
    sz[0] += n - (sz[0] + sz[1] + sz[2]);
    return sz;
}

void assign_group(std::vector<std::string> ids, std::array<int, 3> ratios, Rng& rng,
                  SplitAssignment& out) {
    rng.shuffle(ids);
    auto sz = split_sizes(ids.size(), ratios);
    size_t i = 0;
    for (size_t k = 0; k < sz[0]; ++k) out.train.push_back(ids[i++]);
    for (size_t k = 0; k < sz[1]; ++k) out.val.push_back(ids[i++]);
    for (size_t k = 0; k < sz[2]; ++k) out.test.push_back(ids[i++]);
}

} // namespace

SplitAssignment split_dataset(const DatasetManifest& manifest, std::array<int, 3> ratios,
                              uint64_t seed, bool stratify) {
    if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0)
        throw ValidationError("split ratios must be positive");
    if (manifest.samples.empty()) throw ValidationError("empty manifest");

    SplitAssignment out;
    out.seed = seed;
    out.ratios = ratios;
    Rng rng(seed);

    if (!stratify) {
        std::vector<std::string> ids;
        for (const auto& s : manifest.samples) ids.push_back(s.id);
        assign_group(std::move(ids), ratios, rng, out);
        return out;
    }

    std::map<Stratum, std::vector<std::string>> groups;
    for (const auto& s : manifest.samples) groups[s.stratum].push_back(s.id);
    for (const auto& [st, ids] : groups)
        if (ids.size() < 3)
            throw ValidationError("stratification error: stratum '" + stratum_name(st) +
                                  "' has fewer than 3 samples");
    for (auto& [st, ids] : groups) assign_group(ids, ratios, rng, out);
    return out;
}

SplitAssignment subsample_training(const SplitAssignment& split, double fraction, uint64_t seed,
                                   SubsampleUnit) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ValidationError("fraction must be in (0,1]");
    if (split.train.empty()) throw ValidationError("empty training set");
    SplitAssignment out = split;
    if (fraction == 1.0) return out;
    size_t n = split.train.size();
    size_t keep = std::max<size_t>(1, static_cast<size_t>(std::llround(fraction * static_cast<double>(n))));
    std::vector<std::string> ids = split.train;
    Rng rng(seed);
    rng.shuffle(ids);
    ids.resize(keep);
    out.train = std::move(ids);
    return out;
}

cv::Mat derive_mask_from_if(const cv::Mat& if_image, double threshold, int min_size) {
    CV_Assert(if_image.type() == CV_8UC1);
    cv::Mat mask = if_image >= threshold; // 0/255
    mask /= 255;
    if (min_size > 0) {
        cv::Mat labels, stats, centroids;
        int n = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 8, CV_32S);
        for (int lb = 1; lb < n; ++lb) {
            if (stats.at<int>(lb, cv::CC_STAT_AREA) < min_size) {
                mask.setTo(0, labels == lb);
            }
        }
    }
    return mask;
}

std::vector<BoxAnnotation> boxes_from_mask(const cv::Mat& instance_mask, BoxSource mode,
                                           double jitter_frac, uint64_t seed,
                                           const std::string& class_name) {
    CV_Assert(instance_mask.type() == CV_32S || instance_mask.type() == CV_16U ||
              instance_mask.type() == CV_8U);
    if (mode == BoxSource::random && jitter_frac <= 0.0)
        throw ValidationError("random boxes require jitter_frac > 0");
    int h = instance_mask.rows, w = instance_mask.cols;

    auto label_at = [&](int y, int x) -> int {
        switch (instance_mask.type()) {
            case CV_32S: return instance_mask.at<int>(y, x);
            case CV_16U: return instance_mask.at<uint16_t>(y, x);
            default: return instance_mask.at<uint8_t>(y, x);
        }
    };

    std::map<int, std::array<int, 4>> extents; // label -> x0,y0,x1,y1 (half-open)
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int lb = label_at(y, x);
            if (lb <= 0) continue;
            auto it = extents.find(lb);
            if (it == extents.end())
                extents[lb] = {x, y, x + 1, y + 1};
            else {
                auto& e = it->second;
                e[0] = std::min(e[0], x);
                e[1] = std::min(e[1], y);
                e[2] = std::max(e[2], x + 1);
                e[3] = std::max(e[3], y + 1);
            }
        }

    Rng rng(seed);
    std::vector<BoxAnnotation> out;
    for (const auto& [lb, e] : extents) {
        BoxAnnotation b;
        b.class_name = class_name;
        b.x0 = e[0];
        b.y0 = e[1];
        b.x1 = e[2];
        b.y1 = e[3];
        b.source = mode;
        if (mode == BoxSource::random) {
            double dw = jitter_frac * b.width();
            double dh = jitter_frac * b.height();
            int x0 = b.x0 + static_cast<int>(std::lround(rng.next_uniform(-dw, dw)));
            int x1 = b.x1 + static_cast<int>(std::lround(rng.next_uniform(-dw, dw)));
            int y0 = b.y0 + static_cast<int>(std::lround(rng.next_uniform(-dh, dh)));
            int y1 = b.y1 + static_cast<int>(std::lround(rng.next_uniform(-dh, dh)));
            b.x0 = std::clamp(x0, 0, w - 1);
            b.y0 = std::clamp(y0, 0, h - 1);
            b.x1 = std::clamp(std::max(x1, b.x0 + 1), b.x0 + 1, w);
            b.y1 = std::clamp(std::max(y1, b.y0 + 1), b.y0 + 1, h);
        }
        out.push_back(b);
    }
    return out;
}

std::vector<TileCoord> tile_image(int height, int width, int tile, int stride) {
    if (tile > height || tile > width)
        throw ValidationError("tile larger than image");
    if (stride <= 0) throw ValidationError("stride must be positive");
    auto anchors = [&](int extent) {
        std::vector<int> a;
        for (int p = 0;; p += stride) {
            if (p + tile >= extent) {
                a.push_back(extent - tile); // edge-anchored final tile
                break;
            }
            a.push_back(p);
        }
        return a;
    };
    std::vector<TileCoord> out;
    for (int y : anchors(height))
        for (int x : anchors(width)) out.push_back({x, y});
    return out;
}

std::vector<BoxAnnotation> read_boxes_jsonl(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open boxes: " + file.string());
    std::vector<BoxAnnotation> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        BoxAnnotation b;
        b.class_name = j.at("class").get<std::string>();
        auto bb = j.at("bbox");
        b.x0 = bb.at(0).get<int>();
        b.y0 = bb.at(1).get<int>();
        b.x1 = bb.at(2).get<int>();
        b.y1 = bb.at(3).get<int>();
        b.source = box_source_from_name(j.at("source").get<std::string>());
        if (!(b.x0 < b.x1 && b.y0 < b.y1))
            throw ValidationError("degenerate box in " + file.string());
        out.push_back(b);
    }
    return out;
}

void write_boxes_jsonl(const fs::path& file, const std::vector<BoxAnnotation>& boxes) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot write boxes: " + file.string());
    for (const auto& b : boxes) {
        json j;
        j["class"] = b.class_name;
        j["bbox"] = {b.x0, b.y0, b.x1, b.y1};
        j["source"] = box_source_name(b.source);
        out << j.dump() << "\n";
    }
}

cv::Mat read_mask_png(const fs::path& file) {
    cv::Mat m = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw IoError("cannot read mask: " + file.string());
    cv::Mat out = m > 127;
    out /= 255;
    return out;
}

void write_mask_png(const fs::path& file, const cv::Mat& mask01) {
    CV_Assert(mask01.type() == CV_8UC1);
    cv::Mat m = mask01 * 255;
    if (!cv::imwrite(file.string(), m)) throw IoError("cannot write mask: " + file.string());
}

cv::Mat read_instance_png16(const fs::path& file) {
    cv::Mat m = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw IoError("cannot read instance map: " + file.string());
    cv::Mat out;
    m.convertTo(out, CV_32S);
    return out;
}

void write_instance_png16(const fs::path& file, const cv::Mat& labels32) {
    CV_Assert(labels32.type() == CV_32S);
    double mx;
    cv::minMaxLoc(labels32, nullptr, &mx);
    if (mx > 65535) throw ValidationError("instance map exceeds 16-bit range");
    cv::Mat m;
    labels32.convertTo(m, CV_16U);
    if (!cv::imwrite(file.string(), m)) throw IoError("cannot write instance map: " + file.string());
}

} // namespace moclseg
