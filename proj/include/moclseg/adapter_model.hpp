#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "moclseg/core.hpp"
#include "moclseg/tensor.hpp"

namespace moclseg {

struct EncoderConfig {
    int patch_size = 8;
    int embed_dim = 64;
    int depth = 4;
    int num_heads = 4;
    int input_size = 128;

    void validate() const;
    int tokens_per_side() const { return input_size / patch_size; }
};

struct AdapterConfig {
    int bottleneck_dim = 16;
    std::vector<int> inject_blocks; // empty => last half of blocks at build time
    double texture_sigma = 2.0;
    int embed_channels = 32; // M, decoder embedding head width

    void validate(const EncoderConfig& enc) const;
};

struct Hyperparams {
    int batch_size = 4;
    double learning_rate = 1e-3;
    int epochs = 100;
    int patience = 20;
    uint64_t seed = 42;
};

struct TrainingHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> val_dice;
    int best_epoch = -1;
};

// Forward pass with the autodiff graph still attached; training and the
// corrective stage both consume this.
struct ForwardResult {
    nn::Var prob;       // {C, H, W}, sigmoid outputs
    nn::Var embeddings; // {M, H', W'} from the decoder's last feature layer
    nn::Var class_prob(int c) const; // {H, W} view of one class channel
};

struct PredictionOutput {
    std::vector<cv::Mat> prob;  // per class, CV_32F H x W in [0,1]
    nn::Tensor embeddings;      // {M, H', W'}
};

struct TrainSample {
    cv::Mat image;                 // CV_8UC3, input_size x input_size
    std::vector<cv::Mat> targets;  // per class CV_8UC1 {0,1}; may be empty masks
};

// Per-class loss hook: (class prob Var {H,W}, target mask, class index) -> scalar Var.
using ClassLossFn = std::function<nn::Var(const nn::Var&, const cv::Mat&, int)>;

class AdapterModel {
public:
    EncoderConfig enc;
    AdapterConfig ad;
    int num_classes = 1;
    std::vector<std::string> class_names;

    std::vector<nn::Var> all_params;       // named; backbone ones have requires_grad=false

    static AdapterModel build(const EncoderConfig& enc, const AdapterConfig& ad, int num_classes,
                              uint64_t seed = 42);

    std::vector<nn::Var> trainable_params() const;
    std::vector<nn::Var> backbone_params() const;
    size_t adapter_unit_count() const { return adapter_units_; }

    uint64_t backbone_hash() const;

    ForwardResult forward(const cv::Mat& image) const;
    PredictionOutput predict(const cv::Mat& image) const;
    // Larger inputs: tiled inference with overlap averaging on the prob maps.
    std::vector<cv::Mat> predict_tiled(const cv::Mat& image) const;

    void save(const fs::path& checkpoint) const;
    static AdapterModel load(const fs::path& checkpoint);
    void load_pretrained_backbone(const fs::path& checkpoint);

private:
    size_t adapter_units_ = 0;
    nn::Var param(const std::string& name) const;
    friend TrainingHistory train_adapter(AdapterModel&, const std::vector<TrainSample>&,
                                         const std::vector<TrainSample>&, const Hyperparams&,
                                         const ClassLossFn&);
};

// Gaussian high-pass residual of the grayscale image, standardized to zero
// mean / unit variance (all zeros for constant inputs). CV_32F output.
cv::Mat extract_texture_features(const cv::Mat& image, double sigma);

// Dice + BCE with unit weights; the default training loss.
nn::Var plain_dice_bce(const nn::Var& class_prob, const cv::Mat& target, int class_index);

TrainingHistory train_adapter(AdapterModel& model, const std::vector<TrainSample>& train,
                              const std::vector<TrainSample>& val, const Hyperparams& hp,
                              const ClassLossFn& loss = plain_dice_bce);

// Adam over an explicit parameter list.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<nn::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    void step();
    void zero_grad();

private:
    std::vector<nn::Var> params_;
    std::vector<std::vector<float>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// Mean soft Dice of thresholded-vs-target masks, used for model selection.
double eval_mean_dice(const AdapterModel& model, const std::vector<TrainSample>& samples,
                      double threshold = 0.5);

} // namespace moclseg
