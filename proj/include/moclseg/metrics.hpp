#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "moclseg/core.hpp"

namespace moclseg {

// Pixel-overlap metrics. Both-empty inputs score 1.0 so background-only
// tiles are not penalized.
double dice(const cv::Mat& pred, const cv::Mat& gt);
double iou(const cv::Mat& pred, const cv::Mat& gt);

// Threshold -> 8-connected components -> drop small -> fill holes -> relabel.
cv::Mat instances_from_prob(const cv::Mat& prob, double threshold, int min_size,
                            bool fill_holes = true);

// Aggregated Jaccard Index (Kumar): greedy best-IoU match per GT instance,
// unmatched prediction pixels added to the union.
double aji(const cv::Mat& pred_labels, const cv::Mat& gt_labels);

struct InstanceF1 {
    double f1 = 0.0, precision = 0.0, recall = 0.0;
    int tp = 0, fp = 0, fn = 0;
};
InstanceF1 instance_f1(const cv::Mat& pred_labels, const cv::Mat& gt_labels, double iou_thresh);

// Mann-Whitney rank formulation with average-rank tie correction.
double pixel_auc(const cv::Mat& prob, const cv::Mat& gt);

struct BestF1 {
    double f1 = 0.0;
    double threshold = 0.0;
};
BestF1 best_f1(const cv::Mat& prob, const cv::Mat& gt, double step = 0.01);

enum class WilcoxonMode { exact, approx, automatic };
struct WilcoxonResult {
    double statistic = 0.0; // min(W+, W-)
    double p_two_sided = 1.0;
    int n_used = 0; // after dropping zero differences
    bool exact = false;
};
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    WilcoxonMode mode = WilcoxonMode::automatic);

struct MetricsReport {
    // image id -> metric name -> value; absent metrics (e.g. single-class AUC)
    // are simply missing from the map
    std::map<std::string, std::map<std::string, double>> per_image;
    std::map<std::string, std::pair<double, double>> aggregate; // mean, std
    struct Comparison {
        std::string method_a, method_b, metric;
        double p_value;
    };
    std::vector<Comparison> comparisons;

    void finalize(); // fills aggregate from per_image
    std::string to_json() const;
    static MetricsReport from_json(const std::string& text);
};

} // namespace moclseg
