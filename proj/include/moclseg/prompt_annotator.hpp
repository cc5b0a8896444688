#pragma once

#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "moclseg/data_ingest.hpp"

namespace moclseg {

// A promptable backend converts one box prompt into a binary mask confined
// to that box. Implementations must be stateless per call so annotation can
// run concurrently across images.
class PromptableBackend {
public:
    virtual ~PromptableBackend() = default;
    virtual std::string name() const = 0;
    // Returns a full-size CV_8UC1 {0,1} mask; nonzero pixels only inside box.
    virtual cv::Mat segment(const cv::Mat& image, const BoxAnnotation& box) const = 0;
};

struct InstanceProvenance {
    int instance_id = 0; // 0 when the backend produced an empty mask
    BoxAnnotation box;
    bool dropped = false;
};

struct PixelAnnotation {
    std::map<std::string, cv::Mat> class_masks; // CV_8UC1 {0,1}
    cv::Mat instance_map;                       // CV_32S, 0 background
    std::vector<InstanceProvenance> provenance;
    std::vector<std::string> instance_classes;  // class of instance id i at [i-1]
};

// Classical zero-download backend: Otsu bipartition inside the box, the
// partition farther from the box-border ring mean is foreground, largest
// component kept, 3x3 morphological closing.
class BuiltinBackend : public PromptableBackend {
public:
    std::string name() const override { return "builtin"; }
    cv::Mat segment(const cv::Mat& image, const BoxAnnotation& box) const override;
};

struct BackendConfig {
    int input_size = 128; // model input edge for the checkpoint backend
    double prob_threshold = 0.5;
};

std::shared_ptr<PromptableBackend> make_builtin_backend();
// Wraps a trained segmentation checkpoint (the archive format written by the
// adapter model) as a promptable backend; its output is masked to the box.
std::shared_ptr<PromptableBackend> load_checkpoint_backend(const fs::path& checkpoint,
                                                           const BackendConfig& config);

PixelAnnotation segment_boxes(const cv::Mat& image, const std::vector<BoxAnnotation>& boxes,
                              const PromptableBackend& backend);

} // namespace moclseg
