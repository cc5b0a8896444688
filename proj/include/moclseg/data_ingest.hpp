#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "moclseg/core.hpp"

namespace moclseg {

enum class Stratum { normal, injured, unknown };
enum class BoxSource { tight, random, human };

std::string stratum_name(Stratum s);
Stratum stratum_from_name(const std::string& s);
std::string box_source_name(BoxSource s);
BoxSource box_source_from_name(const std::string& s);

// Half-open pixel box: [x0,x1) x [y0,y1).
struct BoxAnnotation {
    std::string class_name;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    BoxSource source = BoxSource::tight;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    int area() const { return width() * height(); }
};

struct SampleRecord {
    std::string id;
    fs::path image_path;
    std::map<std::string, fs::path> if_paths;    // class name -> IF channel image
    std::map<std::string, fs::path> mask_paths;  // class name -> binary mask
    std::optional<fs::path> box_path;            // JSONL of boxes
    Stratum stratum = Stratum::unknown;
    std::map<std::string, double> if_thresholds; // per-marker, from manifest
};

struct DatasetManifest {
    fs::path root_path;
    std::vector<SampleRecord> samples;
    std::vector<std::string> class_names; // union over samples, sorted

    const SampleRecord& record(const std::string& id) const;
};

struct PatchSample {
    cv::Mat image;                                // H x W, CV_8UC3
    std::map<std::string, cv::Mat> if_channels;   // H x W, CV_8UC1
    std::map<std::string, cv::Mat> class_masks;   // H x W, CV_8UC1 in {0,1}
    std::vector<BoxAnnotation> boxes;
    Stratum stratum = Stratum::unknown;
};

struct SplitAssignment {
    std::vector<std::string> train, val, test;
    uint64_t seed = 0;
    std::array<int, 3> ratios{6, 1, 3};
};

enum class SubsampleUnit { sample, patch };

struct TileCoord {
    int x = 0, y = 0; // top-left
};

DatasetManifest load_manifest(const fs::path& root, const fs::path& manifest_file);
PatchSample load_sample(const DatasetManifest& manifest, const SampleRecord& rec);

SplitAssignment split_dataset(const DatasetManifest& manifest, std::array<int, 3> ratios,
                              uint64_t seed, bool stratify);

// Reduces the training list to max(1, round(fraction * N)) entries. With
// unit == patch the ids are expected to already be patch-level units.
SplitAssignment subsample_training(const SplitAssignment& split, double fraction, uint64_t seed,
                                   SubsampleUnit unit = SubsampleUnit::patch);

// mask = (if_image >= threshold), components below min_size removed.
cv::Mat derive_mask_from_if(const cv::Mat& if_image, double threshold, int min_size);

std::vector<BoxAnnotation> boxes_from_mask(const cv::Mat& instance_mask, BoxSource mode,
                                           double jitter_frac, uint64_t seed,
                                           const std::string& class_name = "cell");

// Tile coordinates covering the image; trailing tiles are anchored to the
// image edge so coverage is exact even when stride does not divide evenly.
std::vector<TileCoord> tile_image(int height, int width, int tile, int stride);

// JSONL box file IO per the external interface.
std::vector<BoxAnnotation> read_boxes_jsonl(const fs::path& file);
void write_boxes_jsonl(const fs::path& file, const std::vector<BoxAnnotation>& boxes);

// Mask helpers shared across modules. Masks are {0,1} CV_8UC1; PNGs on disk
// use {0,255}.
cv::Mat read_mask_png(const fs::path& file);
void write_mask_png(const fs::path& file, const cv::Mat& mask01);
cv::Mat read_instance_png16(const fs::path& file);
void write_instance_png16(const fs::path& file, const cv::Mat& labels32);

} // namespace moclseg
