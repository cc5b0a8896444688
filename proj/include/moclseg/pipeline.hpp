#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "moclseg/adapter_model.hpp"
#include "moclseg/data_ingest.hpp"
#include "moclseg/metrics.hpp"
#include "moclseg/mocl.hpp"

namespace moclseg {

// ---- minimal TOML subset: [section] headers, scalar and flat-array values ----
struct TomlValue;
using TomlArray = std::vector<TomlValue>;
struct TomlValue : std::variant<int64_t, double, bool, std::string, TomlArray> {
    using variant::variant;
    int64_t as_int() const;
    double as_double() const;
    bool as_bool() const;
    const std::string& as_string() const;
    const TomlArray& as_array() const;
};
using TomlTable = std::map<std::string, std::map<std::string, TomlValue>>;

TomlTable parse_toml(const std::string& text);
TomlTable parse_toml_file(const fs::path& file);
std::string dump_toml(const TomlTable& t);

// ---- experiment configuration ----
enum class AnnotationCondition { complete, weak_tight, weak_random };
enum class AnnotatorTier { expert, student };

std::string condition_name(AnnotationCondition c);
AnnotationCondition condition_from_name(const std::string& s);
std::string tier_name(AnnotatorTier t);
AnnotatorTier tier_from_name(const std::string& s);

struct MetricConfig {
    double threshold = 0.5;
    int min_size = 10;
    double iou_thresh = 0.5;
    double best_f1_step = 0.01;
};

struct ExperimentConfig {
    std::string name = "run";
    fs::path dataset_root;
    AnnotationCondition condition = AnnotationCondition::weak_tight;
    AnnotatorTier tier = AnnotatorTier::expert;
    double fraction = 1.0;
    std::vector<uint64_t> seeds{42};
    SubsampleUnit subsample_unit = SubsampleUnit::patch;

    std::array<int, 3> split_ratios{6, 1, 3};
    uint64_t split_seed = 42;
    bool stratify = false;

    EncoderConfig model;
    AdapterConfig adapter;
    Hyperparams train;
    // corrective pass: few epochs at a low rate so it can only nudge the
    // model toward the confidence/similarity-weighted consensus
    Hyperparams refine_hp{4, 2e-5, 2, 20, 42};
    MoclConfig mocl;
    MetricConfig metrics;

    std::string backend = "builtin"; // builtin | checkpoint
    fs::path backend_checkpoint;
    double jitter_frac = 0.1;

    void validate() const;
    TomlTable to_toml() const;
    static ExperimentConfig from_toml(const TomlTable& t);
    static ExperimentConfig defaults();
    // stable under field reordering: canonical sorted-key serialization
    uint64_t config_hash() const;
};

struct RunRecord {
    std::string config_hash;
    std::map<std::string, std::string> stage_timestamps; // stage -> ISO time
    std::map<std::string, std::string> artifacts;        // name -> path
    std::string environment;
    ExperimentConfig config;

    std::string to_json() const;
};

// ---- synthetic dataset ----
struct SynthConfig {
    int n_patches = 64;
    std::vector<std::string> classes{"podocyte", "mesangial"};
    uint64_t seed = 42;
    int patch_size = 128;
    double if_threshold = 128.0;
};

DatasetManifest generate_synthetic_dataset(const fs::path& out_dir, const SynthConfig& cfg);

// ---- pipeline stages ----
// Stage outputs land in run_dir; existing outputs are skipped unless force.
RunRecord run_pipeline(const ExperimentConfig& config, const fs::path& run_dir, bool force = false);

// individual stages, reused by the CLI subcommands
SplitAssignment stage_prepare(const ExperimentConfig& config, const fs::path& run_dir, bool force);
void stage_annotate(const ExperimentConfig& config, const fs::path& run_dir, bool force);
void stage_train(const ExperimentConfig& config, const fs::path& run_dir, bool force);
void stage_refine(const ExperimentConfig& config, const fs::path& run_dir, bool force);
MetricsReport stage_eval(const ExperimentConfig& config, const fs::path& run_dir, bool force);

MetricsReport evaluate_model(const AdapterModel& model, const DatasetManifest& manifest,
                             const std::vector<std::string>& ids, const MetricConfig& mc);

// ---- experiment matrix and reporting ----
struct MatrixRow {
    std::string method;
    std::string label_condition;
    double fraction = 1.0;
    std::map<std::string, double> metrics; // dice, auc, recall, precision, bestF1, iou, aji
    std::map<std::string, double> p_vs_ref; // metric -> Wilcoxon p (absent for the ref row)
    bool is_reference = false;
    fs::path run_dir;
};

struct MatrixResult {
    std::vector<MatrixRow> rows;
    std::vector<std::string> test_ids;
};

MatrixResult run_matrix(const std::vector<ExperimentConfig>& configs, size_t reference_index,
                        const fs::path& out_dir, bool force = false);

// results_table.json / results_table.csv / per-metric plots
void emit_report(const MatrixResult& result, const fs::path& out_dir);

// Column order of the results table.
const std::vector<std::string>& report_metric_columns();

} // namespace moclseg
