#pragma once

// Molecular-Oriented Corrective Learning: confidence-guided prototype
// selection over decoder embeddings and the weighted compound loss that
// drives the refinement stage.

#include <opencv2/core.hpp>

#include "moclseg/adapter_model.hpp"
#include "moclseg/tensor.hpp"

namespace moclseg {

struct ConfidenceMap {
    cv::Mat w; // CV_32F, H x W, values in [0,1]
};

struct TopKEntry {
    std::vector<float> embedding; // M channels
    float confidence = 0.0f;
    int row = 0, col = 0; // location on the embedding grid
};

struct TopKSelection {
    std::vector<TopKEntry> entries; // sorted by confidence descending
    int k_requested = 0;
    std::string class_name;
};

struct SimilarityMap {
    cv::Mat s; // CV_64F, H x W, values in [-1, 1]
};

struct WeightMaps {
    cv::Mat omega_w; // CV_32F >= 0
    cv::Mat omega_s; // CV_32F
    double eps_floor = 0.0;
};

enum class TopKAggregation { mean_of_cosines, mean_embedding };

struct MoclConfig {
    int k = 64;
    double eps_floor = 0.05;
    TopKAggregation aggregation = TopKAggregation::mean_of_cosines;
    bool enable_during_training = false;
};

// Selects one class channel of the prediction as the confidence score.
ConfidenceMap confidence_map(const std::vector<cv::Mat>& prob, int class_index);

// Among annotated (Y=1) pixels on the embedding grid, the k highest-confidence
// embedding vectors; fewer annotated pixels than k returns all of them.
// Y and W are given at image resolution and resampled to the embedding grid
// by nearest neighbor.
TopKSelection select_topk(const nn::Tensor& embeddings, const ConfidenceMap& w, const cv::Mat& y,
                          int k, const std::string& class_name = "");

// Per-pixel mean cosine similarity against the selected embeddings, bilinearly
// upsampled to (out_h, out_w). Zero-norm pixels map to 0.
SimilarityMap similarity_map(const nn::Tensor& embeddings, const TopKSelection& sel, int out_h,
                             int out_w, TopKAggregation agg = TopKAggregation::mean_of_cosines);

// omega_w = exp(W)*Y, omega_s = S*Y; both floored at eps_floor where Y=0.
WeightMaps weight_maps(const ConfidenceMap& w, const SimilarityMap& s, const cv::Mat& y,
                       double eps_floor);

// Scalar weighted soft-Dice + BCE with per-pixel weight omega_w * omega_s.
// Value-level entry point, evaluated in double precision; prob may be CV_32F
// or CV_64F. mocl_loss_var is the autodiff counterpart used in refinement.
// Throws on all-zero total weight.
double mocl_loss(const cv::Mat& y, const cv::Mat& prob, const WeightMaps& wm);
nn::Var mocl_loss_var(const nn::Var& class_prob, const cv::Mat& y, const WeightMaps& wm);

// Analytic gradient of mocl_loss with respect to prob, CV_64F, same size.
cv::Mat mocl_loss_grad(const cv::Mat& y, const cv::Mat& prob, const WeightMaps& wm);

struct RefineHistory {
    std::vector<double> train_loss;
    std::vector<double> mean_omega_fg; // mean total weight on Y=1 pixels, per epoch
    std::vector<double> mean_omega_bg; // and on Y=0 pixels
    std::vector<double> val_dice;      // only when a validation set is given
    int best_epoch = -1;               // -1 = the pre-refinement state was kept
    int images_skipped = 0;
};

// One corrective pass: per image and class, predict -> confidence -> top-k ->
// similarity -> weights -> weighted loss; gradients reach adapters and
// decoder only. Classes with an empty annotation in an image are skipped.
// With a non-empty validation set the best state by mean validation Dice is
// kept, with the pre-refinement state as the baseline candidate, so the pass
// can only retain changes that validate.
RefineHistory refine(AdapterModel& model, const std::vector<TrainSample>& train,
                     const Hyperparams& hp, const MoclConfig& cfg,
                     const std::vector<TrainSample>& val = {});

} // namespace moclseg
