#include "moclseg/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "moclseg/prompt_annotator.hpp"

namespace moclseg {

using json = nlohmann::json;

namespace {

std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    json j;
    in >> j;
    return j;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

SplitAssignment read_split(const fs::path& run_dir) {
    json j = read_json(run_dir / "split.json");
    SplitAssignment s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

cv::Mat gt_instances(const cv::Mat& class_mask) {
    cv::Mat labels;
    cv::connectedComponents(class_mask, labels, 8, CV_32S);
    return labels;
}

BoxAnnotation jitter_box(const BoxAnnotation& b, double jitter_frac, Rng& rng, int w, int h) {
    BoxAnnotation out = b;
    double dw = jitter_frac * b.width(), dh = jitter_frac * b.height();
    int x0 = b.x0 + static_cast<int>(std::lround(rng.next_uniform(-dw, dw)));
    int x1 = b.x1 + static_cast<int>(std::lround(rng.next_uniform(-dw, dw)));
    int y0 = b.y0 + static_cast<int>(std::lround(rng.next_uniform(-dh, dh)));
    int y1 = b.y1 + static_cast<int>(std::lround(rng.next_uniform(-dh, dh)));
    out.x0 = std::clamp(x0, 0, w - 1);
    out.y0 = std::clamp(y0, 0, h - 1);
    out.x1 = std::clamp(std::max(x1, out.x0 + 1), out.x0 + 1, w);
    out.y1 = std::clamp(std::max(y1, out.y0 + 1), out.y0 + 1, h);
    out.source = BoxSource::random;
    return out;
}

// lay-annotator noise stand-in: boundary dilation/erosion of +-2 px and 10%
// instance dropout
cv::Mat student_noise(const cv::Mat& mask01, Rng& rng) {
    cv::Mat labels;
    int n = cv::connectedComponents(mask01, labels, 8, CV_32S);
    cv::Mat out = cv::Mat::zeros(mask01.size(), CV_8UC1);
    for (int lb = 1; lb < n; ++lb) {
        if (rng.next_double() < 0.10) continue; // dropped instance
        cv::Mat comp = (labels == lb);
        int delta = rng.next_int(-2, 2);
        if (delta != 0) {
            cv::Mat kernel = cv::getStructuringElement(
                cv::MORPH_ELLIPSE, cv::Size(2 * std::abs(delta) + 1, 2 * std::abs(delta) + 1));
            if (delta > 0)
                cv::dilate(comp, comp, kernel);
            else
                cv::erode(comp, comp, kernel);
        }
        out |= comp;
    }
    out /= 255;
    return out;
}

std::vector<TrainSample> load_annotated_samples(const DatasetManifest& manifest,
                                                const std::vector<std::string>& ids,
                                                const fs::path& ann_dir,
                                                const std::vector<std::string>& classes) {
    std::vector<TrainSample> out;
    for (const auto& id : ids) {
        const auto& rec = manifest.record(id);
        TrainSample s;
        s.image = cv::imread(rec.image_path.string(), cv::IMREAD_COLOR);
        if (s.image.empty()) throw IoError("cannot read " + rec.image_path.string());
        for (const auto& cls : classes) {
            fs::path mp = ann_dir / id / (cls + ".png");
            if (fs::exists(mp))
                s.targets.push_back(read_mask_png(mp));
            else
                s.targets.push_back(cv::Mat::zeros(s.image.size(), CV_8UC1));
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace

SplitAssignment stage_prepare(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    fs::create_directories(run_dir);
    fs::path split_file = run_dir / "split.json";
    if (fs::exists(split_file) && !force) return read_split(run_dir);

    if (!fs::exists(config.dataset_root / "manifest.json"))
        throw StageError("prepare: dataset manifest not found under " +
                         config.dataset_root.string());
    DatasetManifest manifest = load_manifest(config.dataset_root, config.dataset_root / "manifest.json");
    SplitAssignment split =
        split_dataset(manifest, config.split_ratios, config.split_seed, config.stratify);
    split = subsample_training(split, config.fraction, config.seeds[0], config.subsample_unit);

    json j;
    j["train"] = split.train;
    j["val"] = split.val;
    j["test"] = split.test;
    j["seed"] = split.seed;
    write_json(split_file, j);
    return split;
}

void stage_annotate(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    fs::path ann_dir = run_dir / "annotations";
    fs::path index_file = ann_dir / "annotations.json";
    if (fs::exists(index_file) && !force) return;

    DatasetManifest manifest = load_manifest(config.dataset_root, config.dataset_root / "manifest.json");
    SplitAssignment split = read_split(run_dir);
    fs::create_directories(ann_dir);

    std::shared_ptr<PromptableBackend> backend;
    if (config.condition != AnnotationCondition::complete) {
        if (config.backend == "checkpoint")
            backend = load_checkpoint_backend(config.backend_checkpoint, BackendConfig{});
        else
            backend = make_builtin_backend();
    }

    std::vector<std::string> ids = split.train;
    ids.insert(ids.end(), split.val.begin(), split.val.end());

    json index;
    index["condition"] = condition_name(config.condition);
    index["annotator"] = tier_name(config.tier);
    index["samples"] = json::array();

    size_t sample_idx = 0;
    for (const auto& id : ids) {
        const auto& rec = manifest.record(id);
        PatchSample sample = load_sample(manifest, rec);
        fs::path sdir = ann_dir / id;
        fs::create_directories(sdir);

        std::map<std::string, cv::Mat> class_masks;
        json prov = json::array();

        if (config.condition == AnnotationCondition::complete) {
            class_masks = sample.class_masks;
            cv::Mat uni = cv::Mat::zeros(sample.image.size(), CV_8UC1);
            for (const auto& [cls, m] : class_masks) uni |= m;
            write_instance_png16(sdir / "instance.png", gt_instances(uni));
        } else {
            std::vector<BoxAnnotation> boxes = sample.boxes;
            if (boxes.empty()) {
                // derive tight boxes from the ground-truth masks
                for (const auto& [cls, m] : sample.class_masks) {
                    auto bs = boxes_from_mask(gt_instances(m), BoxSource::tight, 0.0,
                                              config.seeds[0], cls);
                    boxes.insert(boxes.end(), bs.begin(), bs.end());
                }
            }
            if (config.condition == AnnotationCondition::weak_random) {
                Rng rng(config.seeds[0] ^ (0xb0c5ull + sample_idx));
                for (auto& b : boxes)
                    b = jitter_box(b, config.jitter_frac, rng, sample.image.cols, sample.image.rows);
            }
            PixelAnnotation ann = segment_boxes(sample.image, boxes, *backend);
            class_masks = ann.class_masks;
            write_instance_png16(sdir / "instance.png", ann.instance_map);
            for (const auto& p : ann.provenance)
                prov.push_back({{"instance_id", p.instance_id},
                                {"class", p.box.class_name},
                                {"bbox", {p.box.x0, p.box.y0, p.box.x1, p.box.y1}},
                                {"dropped", p.dropped}});
        }

        if (config.tier == AnnotatorTier::student) {
            Rng rng(config.seeds[0] ^ (0x57adull + sample_idx));
            for (auto& [cls, m] : class_masks) m = student_noise(m, rng);
        }

        for (const auto& cls : manifest.class_names) {
            cv::Mat m = class_masks.count(cls) ? class_masks[cls]
                                               : cv::Mat::zeros(sample.image.size(), CV_8UC1);
            write_mask_png(sdir / (cls + ".png"), m);
        }
        write_json(sdir / "provenance.json", prov);
        index["samples"].push_back(id);
        ++sample_idx;
    }
    write_json(index_file, index);
}

void stage_train(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    fs::path ckpt = run_dir / "model.ckpt";
    if (fs::exists(ckpt) && !force) return;

    DatasetManifest manifest = load_manifest(config.dataset_root, config.dataset_root / "manifest.json");
    SplitAssignment split = read_split(run_dir);
    fs::path ann_dir = run_dir / "annotations";

    AdapterModel model = AdapterModel::build(config.model, config.adapter,
                                             static_cast<int>(manifest.class_names.size()),
                                             config.seeds[0]);
    model.class_names = manifest.class_names;

    auto train_samples = load_annotated_samples(manifest, split.train, ann_dir, manifest.class_names);
    auto val_samples = load_annotated_samples(manifest, split.val, ann_dir, manifest.class_names);

    Hyperparams hp = config.train;
    hp.seed = config.seeds[0];
    TrainingHistory hist = train_adapter(model, train_samples, val_samples, hp);

    model.save(ckpt);
    json j;
    j["train_loss"] = hist.train_loss;
    j["val_loss"] = hist.val_loss;
    j["val_dice"] = hist.val_dice;
    j["best_epoch"] = hist.best_epoch;
    j["num_train_patches"] = split.train.size();
    write_json(run_dir / "history.json", j);
}

void stage_refine(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    fs::path out_ckpt = run_dir / "model_refined.ckpt";
    if (fs::exists(out_ckpt) && !force) return;

    DatasetManifest manifest = load_manifest(config.dataset_root, config.dataset_root / "manifest.json");
    SplitAssignment split = read_split(run_dir);

    AdapterModel model = AdapterModel::load(run_dir / "model.ckpt");
    auto train_samples =
        load_annotated_samples(manifest, split.train, run_dir / "annotations", model.class_names);
    auto val_samples =
        load_annotated_samples(manifest, split.val, run_dir / "annotations", model.class_names);

    Hyperparams hp = config.refine_hp;
    hp.seed = config.seeds[0];
    RefineHistory hist = refine(model, train_samples, hp, config.mocl, val_samples);

    model.save(out_ckpt);
    json j;
    j["train_loss"] = hist.train_loss;
    j["mean_omega_fg"] = hist.mean_omega_fg;
    j["mean_omega_bg"] = hist.mean_omega_bg;
    j["val_dice"] = hist.val_dice;
    j["best_epoch"] = hist.best_epoch;
    j["images_skipped"] = hist.images_skipped;
    write_json(run_dir / "refine_history.json", j);
}

MetricsReport evaluate_model(const AdapterModel& model, const DatasetManifest& manifest,
                             const std::vector<std::string>& ids, const MetricConfig& mc) {
    MetricsReport report;
    for (const auto& id : ids) {
        const auto& rec = manifest.record(id);
        PatchSample sample = load_sample(manifest, rec);
        auto probs = model.predict_tiled(sample.image);

        auto& row = report.per_image[id];
        std::map<std::string, std::vector<double>> means;
        for (size_t ci = 0; ci < model.class_names.size(); ++ci) {
            const std::string& cls = model.class_names[ci];
            cv::Mat gt = sample.class_masks.count(cls)
                             ? sample.class_masks[cls]
                             : cv::Mat::zeros(sample.image.size(), CV_8UC1);
            const cv::Mat& prob = probs[ci];
            cv::Mat pred = prob >= mc.threshold;
            pred /= 255;

            double d = dice(pred, gt);
            double i = iou(pred, gt);
            row[cls + ".dice"] = d;
            row[cls + ".iou"] = i;
            means["dice"].push_back(d);
            means["iou"].push_back(i);

            BestF1 bf = best_f1(prob, gt, mc.best_f1_step);
            row[cls + ".bestF1"] = bf.f1;
            means["bestF1"].push_back(bf.f1);

            try {
                double auc = pixel_auc(prob, gt);
                row[cls + ".auc"] = auc;
                means["auc"].push_back(auc);
            } catch (const ValidationError&) {
                // single-class ground truth: AUC recorded as absent
            }

            cv::Mat pred_inst = instances_from_prob(prob, mc.threshold, mc.min_size);
            cv::Mat gt_inst = gt_instances(gt);
            double a = aji(pred_inst, gt_inst);
            InstanceF1 f = instance_f1(pred_inst, gt_inst, mc.iou_thresh);
            row[cls + ".aji"] = a;
            row[cls + ".f1"] = f.f1;
            row[cls + ".precision"] = f.precision;
            row[cls + ".recall"] = f.recall;
            means["aji"].push_back(a);
            means["f1"].push_back(f.f1);
            means["precision"].push_back(f.precision);
            means["recall"].push_back(f.recall);
        }
        for (const auto& [name, vals] : means) {
            double sum = 0;
            for (double v : vals) sum += v;
            row[name] = sum / static_cast<double>(vals.size());
        }
    }
    report.finalize();
    return report;
}

MetricsReport stage_eval(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    fs::path out_file = run_dir / "metrics.json";
    if (fs::exists(out_file) && !force) {
        std::ifstream in(out_file);
        std::stringstream ss;
        ss << in.rdbuf();
        return MetricsReport::from_json(ss.str());
    }

    DatasetManifest manifest = load_manifest(config.dataset_root, config.dataset_root / "manifest.json");
    SplitAssignment split = read_split(run_dir);

    fs::path refined = run_dir / "model_refined.ckpt";
    AdapterModel model =
        AdapterModel::load(fs::exists(refined) ? refined : run_dir / "model.ckpt");
    MetricsReport report = evaluate_model(model, manifest, split.test, config.metrics);

    std::ofstream out(out_file);
    out << report.to_json() << "\n";
    return report;
}

RunRecord run_pipeline(const ExperimentConfig& config, const fs::path& run_dir, bool force) {
    config.validate();
    RunRecord rec;
    rec.config = config;
    rec.config_hash = to_hex(config.config_hash());
    {
        std::ostringstream env;
        env << "opencv-" << CV_VERSION << " ptr" << sizeof(void*) * 8;
        rec.environment = env.str();
    }

    struct Stage {
        const char* name;
        std::function<void()> fn;
    };
    std::vector<Stage> stages = {
        {"prepare", [&] { stage_prepare(config, run_dir, force); }},
        {"annotate", [&] { stage_annotate(config, run_dir, force); }},
        {"train", [&] { stage_train(config, run_dir, force); }},
        {"refine", [&] { stage_refine(config, run_dir, force); }},
        {"eval", [&] { stage_eval(config, run_dir, force); }},
    };
    for (auto& st : stages) {
        try {
            st.fn();
        } catch (const std::exception& e) {
            throw StageError(std::string(st.name) + ": " + e.what());
        }
        rec.stage_timestamps[st.name] = iso_now();
    }
    rec.artifacts["split"] = (run_dir / "split.json").string();
    rec.artifacts["checkpoint"] = (run_dir / "model.ckpt").string();
    rec.artifacts["refined_checkpoint"] = (run_dir / "model_refined.ckpt").string();
    rec.artifacts["metrics"] = (run_dir / "metrics.json").string();
    rec.artifacts["history"] = (run_dir / "history.json").string();
    rec.artifacts["refine_history"] = (run_dir / "refine_history.json").string();

    std::ofstream out(run_dir / "run_record.json");
    out << rec.to_json() << "\n";
    return rec;
}

const std::vector<std::string>& report_metric_columns() {
    static const std::vector<std::string> cols = {"dice", "auc",    "recall", "precision",
                                                  "bestF1", "iou", "aji"};
    return cols;
}

MatrixResult run_matrix(const std::vector<ExperimentConfig>& configs, size_t reference_index,
                        const fs::path& out_dir, bool force) {
    if (configs.size() < 2)
        throw ValidationError("matrix: at least two configurations required");
    if (reference_index >= configs.size())
        throw ValidationError("matrix: reference index out of range");

    MatrixResult result;
    std::vector<MetricsReport> reports;
    for (size_t i = 0; i < configs.size(); ++i) {
        std::ostringstream dir;
        dir << "run_" << i << "_" << condition_name(configs[i].condition) << "_"
            << configs[i].fraction;
        fs::path run_dir = out_dir / dir.str();
        run_pipeline(configs[i], run_dir, force);
        std::ifstream in(run_dir / "metrics.json");
        std::stringstream ss;
        ss << in.rdbuf();
        reports.push_back(MetricsReport::from_json(ss.str()));

        SplitAssignment split = read_split(run_dir);
        if (i == 0)
            result.test_ids = split.test;
        else if (split.test != result.test_ids)
            throw ValidationError("matrix comparison error: test splits differ between configs");

        MatrixRow row;
        row.method = configs[i].name;
        row.label_condition = condition_name(configs[i].condition);
        row.fraction = configs[i].fraction;
        row.is_reference = i == reference_index;
        row.run_dir = run_dir;
        for (const auto& m : report_metric_columns()) {
            auto it = reports[i].aggregate.find(m);
            row.metrics[m] = it == reports[i].aggregate.end() ? 0.0 : it->second.first;
        }
        result.rows.push_back(std::move(row));
    }

    // Wilcoxon vs the reference, paired per test image
    const MetricsReport& ref = reports[reference_index];
    for (size_t i = 0; i < configs.size(); ++i) {
        if (i == reference_index) continue;
        for (const auto& m : report_metric_columns()) {
            std::vector<double> a, b;
            for (const auto& id : result.test_ids) {
                auto ia = reports[i].per_image.find(id);
                auto ib = ref.per_image.find(id);
                if (ia == reports[i].per_image.end() || ib == ref.per_image.end()) continue;
                auto va = ia->second.find(m);
                auto vb = ib->second.find(m);
                if (va == ia->second.end() || vb == ib->second.end()) continue;
                a.push_back(va->second);
                b.push_back(vb->second);
            }
            double p = std::numeric_limits<double>::quiet_NaN(); // degenerate marker
            if (!a.empty()) {
                try {
                    p = wilcoxon_signed_rank(a, b).p_two_sided;
                } catch (const ValidationError&) {
                    // all differences zero: stays degenerate
                }
            }
            result.rows[i].p_vs_ref[m] = p;
        }
    }

    emit_report(result, out_dir);
    return result;
}

} // namespace moclseg
