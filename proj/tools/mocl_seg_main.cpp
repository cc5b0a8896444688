// mocl-seg: weak-box annotation -> adapter fine-tuning -> corrective
// refinement -> evaluation, as one batch pipeline.

#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moclseg/pipeline.hpp"
#include "moclseg/prompt_annotator.hpp"

using namespace moclseg;
using json = nlohmann::json;

namespace {

void log_line(const std::string& event, const json& fields = json::object()) {
    json j = fields;
    j["event"] = event;
    std::cout << j.dump() << std::endl;
}

ExperimentConfig load_config(const std::string& config_file) {
    if (config_file.empty()) return ExperimentConfig::defaults();
    return ExperimentConfig::from_toml(parse_toml_file(config_file));
}

struct CommonOpts {
    std::string config_file;
    std::string dataset;
    std::string out = "runs/run";
    std::string condition;
    std::string annotator;
    double fraction = -1.0;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_file, "TOML config file");
    cmd->add_option("--manifest,--dataset", o.dataset, "dataset root (contains manifest.json)");
    cmd->add_option("--out", o.out, "run directory");
    cmd->add_option("--condition", o.condition, "complete|weak_tight|weak_random");
    cmd->add_option("--annotator", o.annotator, "expert|student");
    cmd->add_option("--fraction", o.fraction, "training fraction in (0,1]");
    cmd->add_flag("--force", o.force, "recompute existing stage outputs");
}

ExperimentConfig resolve(const CommonOpts& o) {
    ExperimentConfig c = load_config(o.config_file);
    if (!o.dataset.empty()) c.dataset_root = o.dataset;
    if (!o.condition.empty()) c.condition = condition_from_name(o.condition);
    if (!o.annotator.empty()) c.tier = tier_from_name(o.annotator);
    if (o.fraction > 0.0) c.fraction = o.fraction;
    c.validate();
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mocl-seg: weakly-supervised multi-class nuclei segmentation pipeline"};
    app.require_subcommand(0, 1);

    std::string emit_default;
    app.add_option("--emit-default", emit_default, "write the default TOML config to a file and exit");

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out = "data/synth";
    SynthConfig synth_cfg;
    std::vector<std::string> synth_classes;
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--n-patches", synth_cfg.n_patches, "number of patches");
    synth->add_option("--classes", synth_classes, "class names");
    synth->add_option("--seed", synth_cfg.seed, "random seed");
    synth->add_option("--patch-size", synth_cfg.patch_size, "patch edge in pixels");

    CommonOpts prep_o, ann_o, train_o, refine_o, eval_o, pipe_o;
    auto* prepare = app.add_subcommand("prepare", "load manifest, split and subsample");
    add_common(prepare, prep_o);
    auto* annotate = app.add_subcommand("annotate", "convert boxes to pixel annotations");
    std::string ann_backend, ann_ckpt;
    add_common(annotate, ann_o);
    annotate->add_option("--backend", ann_backend, "builtin|checkpoint");
    annotate->add_option("--checkpoint", ann_ckpt, "backend checkpoint path");
    auto* train = app.add_subcommand("train", "fine-tune adapters and decoder");
    add_common(train, train_o);
    auto* refine_cmd = app.add_subcommand("refine", "corrective refinement stage");
    std::string refine_ckpt;
    int refine_k = -1;
    double refine_eps = -1.0;
    add_common(refine_cmd, refine_o);
    refine_cmd->add_option("--checkpoint", refine_ckpt, "checkpoint to refine (defaults to run dir)");
    refine_cmd->add_option("--k", refine_k, "top-k prototypes per class");
    refine_cmd->add_option("--eps-floor", refine_eps, "background weight floor");
    auto* eval_cmd = app.add_subcommand("eval", "evaluate on the test split");
    std::string eval_split = "test";
    add_common(eval_cmd, eval_o);
    eval_cmd->add_option("--split", eval_split, "split to evaluate (test|val|train)");
    auto* pipeline = app.add_subcommand("run", "full pipeline: prepare through eval");
    add_common(pipeline, pipe_o);

    auto* compare = app.add_subcommand("compare", "paired Wilcoxon test between two reports");
    std::vector<std::string> cmp_reports;
    std::string cmp_metric = "dice";
    compare->add_option("--reports", cmp_reports, "two metrics.json files")->expected(2);
    compare->add_option("--metric", cmp_metric, "metric name to compare");

    auto* matrix = app.add_subcommand("matrix", "run an experiment matrix");
    CommonOpts mat_o;
    std::vector<std::string> mat_conditions{"complete", "weak_tight"};
    std::vector<double> mat_fractions{1.0, 0.04};
    int mat_ref = 0;
    add_common(matrix, mat_o);
    matrix->add_option("--conditions", mat_conditions, "label conditions");
    matrix->add_option("--fractions", mat_fractions, "training fractions");
    matrix->add_option("--reference", mat_ref, "index of the reference row");

    auto* report = app.add_subcommand("report", "re-emit table and plots from a matrix directory");
    std::string report_dir, report_out;
    report->add_option("--matrix-dir", report_dir, "matrix output directory")->required();
    report->add_option("--out", report_out, "report output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!emit_default.empty()) {
            std::ofstream out(emit_default);
            if (!out) throw IoError("cannot write " + emit_default);
            out << dump_toml(ExperimentConfig::defaults().to_toml());
            log_line("default_config_written", {{"path", emit_default}});
            return 0;
        }

        if (*synth) {
            if (!synth_classes.empty()) synth_cfg.classes = synth_classes;
            auto manifest = generate_synthetic_dataset(synth_out, synth_cfg);
            log_line("synth_done", {{"out", synth_out}, {"samples", manifest.samples.size()}});
        } else if (*prepare) {
            auto cfg = resolve(prep_o);
            auto split = stage_prepare(cfg, prep_o.out, prep_o.force);
            log_line("prepare_done", {{"train", split.train.size()},
                                      {"val", split.val.size()},
                                      {"test", split.test.size()}});
        } else if (*annotate) {
            auto cfg = resolve(ann_o);
            if (!ann_backend.empty()) cfg.backend = ann_backend;
            if (!ann_ckpt.empty()) cfg.backend_checkpoint = ann_ckpt;
            stage_prepare(cfg, ann_o.out, false);
            stage_annotate(cfg, ann_o.out, ann_o.force);
            log_line("annotate_done", {{"out", ann_o.out}});
        } else if (*train) {
            auto cfg = resolve(train_o);
            stage_prepare(cfg, train_o.out, false);
            stage_annotate(cfg, train_o.out, false);
            stage_train(cfg, train_o.out, train_o.force);
            log_line("train_done", {{"checkpoint", (fs::path(train_o.out) / "model.ckpt").string()}});
        } else if (*refine_cmd) {
            auto cfg = resolve(refine_o);
            if (refine_k > 0) cfg.mocl.k = refine_k;
            if (refine_eps >= 0.0) cfg.mocl.eps_floor = refine_eps;
            if (!refine_ckpt.empty())
                fs::copy_file(refine_ckpt, fs::path(refine_o.out) / "model.ckpt",
                              fs::copy_options::overwrite_existing);
            stage_refine(cfg, refine_o.out, refine_o.force);
            log_line("refine_done",
                     {{"checkpoint", (fs::path(refine_o.out) / "model_refined.ckpt").string()}});
        } else if (*eval_cmd) {
            auto cfg = resolve(eval_o);
            auto report_obj = stage_eval(cfg, eval_o.out, eval_o.force);
            json agg = json::object();
            for (const auto& [name, ms] : report_obj.aggregate)
                agg[name] = ms.first;
            log_line("eval_done", {{"aggregate", agg}});
        } else if (*pipeline) {
            auto cfg = resolve(pipe_o);
            auto rec = run_pipeline(cfg, pipe_o.out, pipe_o.force);
            log_line("pipeline_done", {{"config_hash", rec.config_hash}, {"out", pipe_o.out}});
        } else if (*compare) {
            auto load_report = [](const std::string& p) {
                std::ifstream in(p);
                if (!in) throw IoError("cannot open report: " + p);
                std::stringstream ss;
                ss << in.rdbuf();
                return MetricsReport::from_json(ss.str());
            };
            auto ra = load_report(cmp_reports[0]);
            auto rb = load_report(cmp_reports[1]);
            std::vector<double> a, b;
            for (const auto& [id, mm] : ra.per_image) {
                auto ib = rb.per_image.find(id);
                if (ib == rb.per_image.end()) continue;
                auto va = mm.find(cmp_metric);
                auto vb = ib->second.find(cmp_metric);
                if (va == mm.end() || vb == ib->second.end()) continue;
                a.push_back(va->second);
                b.push_back(vb->second);
            }
            if (a.empty()) throw ValidationError("compare: no paired values for " + cmp_metric);
            try {
                auto w = wilcoxon_signed_rank(a, b);
                log_line("compare_done", {{"metric", cmp_metric},
                                          {"n", w.n_used},
                                          {"statistic", w.statistic},
                                          {"p_two_sided", w.p_two_sided},
                                          {"exact", w.exact}});
            } catch (const ValidationError&) {
                log_line("compare_done", {{"metric", cmp_metric}, {"p_two_sided", "degenerate"}});
            }
        } else if (*matrix) {
            auto base = resolve(mat_o);
            std::vector<ExperimentConfig> cfgs;
            for (const auto& cond : mat_conditions)
                for (double f : mat_fractions) {
                    ExperimentConfig c = base;
                    c.condition = condition_from_name(cond);
                    c.fraction = f;
                    std::ostringstream nm;
                    nm << base.name << "_" << cond << "_" << f;
                    c.name = nm.str();
                    cfgs.push_back(c);
                }
            auto res = run_matrix(cfgs, static_cast<size_t>(mat_ref), mat_o.out, mat_o.force);
            log_line("matrix_done", {{"rows", res.rows.size()}, {"out", mat_o.out}});
        } else if (*report) {
            // rebuild the MatrixResult from the stored table
            std::ifstream in(fs::path(report_dir) / "results_table.json");
            if (!in) throw IoError("no results_table.json in " + report_dir);
            json jt;
            in >> jt;
            MatrixResult res;
            for (const auto& jr : jt.at("rows")) {
                MatrixRow row;
                row.method = jr.at("method");
                row.label_condition = jr.at("label");
                row.fraction = jr.at("fraction");
                row.is_reference = jr.at("reference");
                for (const auto& m : report_metric_columns()) row.metrics[m] = jr.at(m);
                for (const auto& [m, p] : jr.at("p_vs_ref").items())
                    row.p_vs_ref[m] =
                        p.is_string() ? std::numeric_limits<double>::quiet_NaN() : p.get<double>();
                res.rows.push_back(row);
            }
            emit_report(res, report_out.empty() ? report_dir : report_out);
            log_line("report_done", {{"out", report_out.empty() ? report_dir : report_out}});
        } else {
            std::cout << app.help() << std::endl;
        }
    } catch (const ValidationError& e) {
        log_line("validation_error", {{"message", e.what()}});
        return 2;
    } catch (const std::exception& e) {
        log_line("stage_error", {{"message", e.what()}});
        return 3;
    }
    return 0;
}
