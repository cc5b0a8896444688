#include "moclseg/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace moclseg {

using json = nlohmann::json;

int64_t TomlValue::as_int() const {
    if (auto p = std::get_if<int64_t>(this)) return *p;
    throw ValidationError("config: expected integer value");
}
double TomlValue::as_double() const {
    if (auto p = std::get_if<double>(this)) return *p;
    if (auto p = std::get_if<int64_t>(this)) return static_cast<double>(*p);
    throw ValidationError("config: expected numeric value");
}
bool TomlValue::as_bool() const {
    if (auto p = std::get_if<bool>(this)) return *p;
    throw ValidationError("config: expected boolean value");
}
const std::string& TomlValue::as_string() const {
    if (auto p = std::get_if<std::string>(this)) return *p;
    throw ValidationError("config: expected string value");
}
const TomlArray& TomlValue::as_array() const {
    if (auto p = std::get_if<TomlArray>(this)) return *p;
    throw ValidationError("config: expected array value");
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

TomlValue parse_scalar(const std::string& tok);

TomlValue parse_value(const std::string& raw) {
    std::string v = trim(raw);
    if (v.empty()) throw ValidationError("config: empty value");
    if (v.front() == '[') {
        if (v.back() != ']') throw ValidationError("config: unterminated array");
        TomlArray arr;
        std::string inner = v.substr(1, v.size() - 2);
        std::string tok;
        int depth = 0;
        bool in_str = false;
        for (char c : inner) {
            if (c == '"') in_str = !in_str;
            if (!in_str && c == '[') depth++;
            if (!in_str && c == ']') depth--;
            if (!in_str && depth == 0 && c == ',') {
                if (!trim(tok).empty()) arr.push_back(parse_value(tok));
                tok.clear();
            } else {
                tok += c;
            }
        }
        if (!trim(tok).empty()) arr.push_back(parse_value(tok));
        return arr;
    }
    return parse_scalar(v);
}

TomlValue parse_scalar(const std::string& tok) {
    if (tok.size() >= 2 && tok.front() == '"' && tok.back() == '"')
        return tok.substr(1, tok.size() - 2);
    if (tok == "true") return true;
    if (tok == "false") return false;
    bool is_float = tok.find_first_of(".eE") != std::string::npos &&
                    tok.find_first_not_of("+-0123456789.eE") == std::string::npos;
    try {
        if (is_float) return std::stod(tok);
        size_t pos = 0;
        int64_t i = std::stoll(tok, &pos);
        if (pos == tok.size()) return i;
        return std::stod(tok);
    } catch (const std::exception&) {
        throw ValidationError("config: cannot parse value '" + tok + "'");
    }
}

} // namespace

TomlTable parse_toml(const std::string& text) {
    TomlTable t;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // strip comments outside strings
        bool in_str = false;
        for (size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ValidationError("config line " + std::to_string(lineno) + ": bad section");
            section = trim(line.substr(1, line.size() - 2));
            t[section]; // create even if empty
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        t[section][key] = parse_value(line.substr(eq + 1));
    }
    return t;
}

TomlTable parse_toml_file(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config: " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_toml(ss.str());
}

namespace {

std::string dump_value(const TomlValue& v) {
    if (auto p = std::get_if<int64_t>(&v)) return std::to_string(*p);
    if (auto p = std::get_if<double>(&v)) {
        std::ostringstream os;
        os << *p;
        std::string s = os.str();
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        return s;
    }
    if (auto p = std::get_if<bool>(&v)) return *p ? "true" : "false";
    if (auto p = std::get_if<std::string>(&v)) return "\"" + *p + "\"";
    const auto& arr = std::get<TomlArray>(v);
    std::string s = "[";
    for (size_t i = 0; i < arr.size(); ++i) {
        if (i) s += ", ";
        s += dump_value(arr[i]);
    }
    return s + "]";
}

} // namespace

std::string dump_toml(const TomlTable& t) {
    std::ostringstream os;
    bool first = true;
    for (const auto& [section, kv] : t) {
        if (!first) os << "\n";
        first = false;
        if (!section.empty()) os << "[" << section << "]\n";
        for (const auto& [k, v] : kv) os << k << " = " << dump_value(v) << "\n";
    }
    return os.str();
}

std::string condition_name(AnnotationCondition c) {
    switch (c) {
        case AnnotationCondition::complete: return "complete";
        case AnnotationCondition::weak_tight: return "weak_tight";
        default: return "weak_random";
    }
}
AnnotationCondition condition_from_name(const std::string& s) {
    if (s == "complete") return AnnotationCondition::complete;
    if (s == "weak_tight") return AnnotationCondition::weak_tight;
    if (s == "weak_random") return AnnotationCondition::weak_random;
    throw ValidationError("unknown annotation condition: " + s);
}
std::string tier_name(AnnotatorTier t) {
    return t == AnnotatorTier::expert ? "expert" : "student";
}
AnnotatorTier tier_from_name(const std::string& s) {
    if (s == "expert") return AnnotatorTier::expert;
    if (s == "student") return AnnotatorTier::student;
    throw ValidationError("unknown annotator tier: " + s);
}

void ExperimentConfig::validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ValidationError("config: fraction must be in (0,1]");
    if (seeds.empty()) throw ValidationError("config: seeds must be non-empty");
    model.validate();
    if (backend != "builtin" && backend != "checkpoint")
        throw ValidationError("config: backend must be builtin or checkpoint");
}

ExperimentConfig ExperimentConfig::defaults() { return ExperimentConfig{}; }

TomlTable ExperimentConfig::to_toml() const {
    TomlTable t;
    auto& run = t["run"];
    run["name"] = name;
    auto& ds = t["dataset"];
    ds["root"] = dataset_root.string();
    ds["condition"] = condition_name(condition);
    ds["annotator"] = tier_name(tier);
    ds["fraction"] = fraction;
    TomlArray sa;
    for (auto s : seeds) sa.push_back(static_cast<int64_t>(s));
    ds["seeds"] = sa;
    ds["subsample_unit"] = std::string(subsample_unit == SubsampleUnit::patch ? "patch" : "sample");
    auto& sp = t["split"];
    sp["ratios"] = TomlArray{static_cast<int64_t>(split_ratios[0]),
                             static_cast<int64_t>(split_ratios[1]),
                             static_cast<int64_t>(split_ratios[2])};
    sp["seed"] = static_cast<int64_t>(split_seed);
    sp["stratify"] = stratify;
    auto& mo = t["model"];
    mo["patch_size"] = static_cast<int64_t>(model.patch_size);
    mo["embed_dim"] = static_cast<int64_t>(model.embed_dim);
    mo["depth"] = static_cast<int64_t>(model.depth);
    mo["num_heads"] = static_cast<int64_t>(model.num_heads);
    mo["input_size"] = static_cast<int64_t>(model.input_size);
    auto& ada = t["adapter"];
    ada["bottleneck_dim"] = static_cast<int64_t>(adapter.bottleneck_dim);
    TomlArray ib;
    for (int b : adapter.inject_blocks) ib.push_back(static_cast<int64_t>(b));
    ada["inject_blocks"] = ib;
    ada["texture_sigma"] = adapter.texture_sigma;
    ada["embed_channels"] = static_cast<int64_t>(adapter.embed_channels);
    auto& tr = t["train"];
    tr["batch_size"] = static_cast<int64_t>(train.batch_size);
    tr["learning_rate"] = train.learning_rate;
    tr["epochs"] = static_cast<int64_t>(train.epochs);
    tr["patience"] = static_cast<int64_t>(train.patience);
    auto& rf = t["refine"];
    rf["batch_size"] = static_cast<int64_t>(refine_hp.batch_size);
    rf["learning_rate"] = refine_hp.learning_rate;
    rf["epochs"] = static_cast<int64_t>(refine_hp.epochs);
    rf["k"] = static_cast<int64_t>(mocl.k);
    rf["eps_floor"] = mocl.eps_floor;
    rf["aggregation"] = std::string(mocl.aggregation == TopKAggregation::mean_of_cosines
                                        ? "mean_of_cosines"
                                        : "mean_embedding");
    rf["enable_during_training"] = mocl.enable_during_training;
    auto& me = t["metrics"];
    me["threshold"] = metrics.threshold;
    me["min_size"] = static_cast<int64_t>(metrics.min_size);
    me["iou_thresh"] = metrics.iou_thresh;
    me["best_f1_step"] = metrics.best_f1_step;
    auto& an = t["annotate"];
    an["backend"] = backend;
    an["checkpoint"] = backend_checkpoint.string();
    an["jitter_frac"] = jitter_frac;
    return t;
}

ExperimentConfig ExperimentConfig::from_toml(const TomlTable& t) {
    ExperimentConfig c;
    auto get = [&](const std::string& sec, const std::string& key) -> const TomlValue* {
        auto si = t.find(sec);
        if (si == t.end()) return nullptr;
        auto ki = si->second.find(key);
        return ki == si->second.end() ? nullptr : &ki->second;
    };
    auto geti = [&](const std::string& s, const std::string& k, int64_t def) {
        auto p = get(s, k);
        return p ? p->as_int() : def;
    };
    auto getd = [&](const std::string& s, const std::string& k, double def) {
        auto p = get(s, k);
        return p ? p->as_double() : def;
    };
    auto gets = [&](const std::string& s, const std::string& k, const std::string& def) {
        auto p = get(s, k);
        return p ? p->as_string() : def;
    };
    auto getb = [&](const std::string& s, const std::string& k, bool def) {
        auto p = get(s, k);
        return p ? p->as_bool() : def;
    };

    c.name = gets("run", "name", c.name);
    c.dataset_root = gets("dataset", "root", c.dataset_root.string());
    c.condition = condition_from_name(gets("dataset", "condition", condition_name(c.condition)));
    c.tier = tier_from_name(gets("dataset", "annotator", tier_name(c.tier)));
    c.fraction = getd("dataset", "fraction", c.fraction);
    if (auto p = get("dataset", "seeds")) {
        c.seeds.clear();
        for (const auto& v : p->as_array()) c.seeds.push_back(static_cast<uint64_t>(v.as_int()));
    }
    c.subsample_unit = gets("dataset", "subsample_unit", "patch") == "sample" ? SubsampleUnit::sample
                                                                             : SubsampleUnit::patch;
    if (auto p = get("split", "ratios")) {
        const auto& a = p->as_array();
        if (a.size() != 3) throw ValidationError("config: split.ratios must have 3 entries");
        for (int i = 0; i < 3; ++i) c.split_ratios[static_cast<size_t>(i)] = static_cast<int>(a[static_cast<size_t>(i)].as_int());
    }
    c.split_seed = static_cast<uint64_t>(geti("split", "seed", static_cast<int64_t>(c.split_seed)));
    c.stratify = getb("split", "stratify", c.stratify);

    c.model.patch_size = static_cast<int>(geti("model", "patch_size", c.model.patch_size));
    c.model.embed_dim = static_cast<int>(geti("model", "embed_dim", c.model.embed_dim));
    c.model.depth = static_cast<int>(geti("model", "depth", c.model.depth));
    c.model.num_heads = static_cast<int>(geti("model", "num_heads", c.model.num_heads));
    c.model.input_size = static_cast<int>(geti("model", "input_size", c.model.input_size));

    c.adapter.bottleneck_dim = static_cast<int>(geti("adapter", "bottleneck_dim", c.adapter.bottleneck_dim));
    if (auto p = get("adapter", "inject_blocks")) {
        c.adapter.inject_blocks.clear();
        for (const auto& v : p->as_array()) c.adapter.inject_blocks.push_back(static_cast<int>(v.as_int()));
    }
    c.adapter.texture_sigma = getd("adapter", "texture_sigma", c.adapter.texture_sigma);
    c.adapter.embed_channels = static_cast<int>(geti("adapter", "embed_channels", c.adapter.embed_channels));

    c.train.batch_size = static_cast<int>(geti("train", "batch_size", c.train.batch_size));
    c.train.learning_rate = getd("train", "learning_rate", c.train.learning_rate);
    c.train.epochs = static_cast<int>(geti("train", "epochs", c.train.epochs));
    c.train.patience = static_cast<int>(geti("train", "patience", c.train.patience));
    c.train.seed = c.seeds[0];

    c.refine_hp.batch_size = static_cast<int>(geti("refine", "batch_size", c.refine_hp.batch_size));
    c.refine_hp.learning_rate = getd("refine", "learning_rate", c.refine_hp.learning_rate);
    c.refine_hp.epochs = static_cast<int>(geti("refine", "epochs", c.refine_hp.epochs));
    c.refine_hp.seed = c.seeds[0];
    c.mocl.k = static_cast<int>(geti("refine", "k", c.mocl.k));
    c.mocl.eps_floor = getd("refine", "eps_floor", c.mocl.eps_floor);
    c.mocl.aggregation = gets("refine", "aggregation", "mean_of_cosines") == "mean_embedding"
                             ? TopKAggregation::mean_embedding
                             : TopKAggregation::mean_of_cosines;
    c.mocl.enable_during_training = getb("refine", "enable_during_training", false);

    c.metrics.threshold = getd("metrics", "threshold", c.metrics.threshold);
    c.metrics.min_size = static_cast<int>(geti("metrics", "min_size", c.metrics.min_size));
    c.metrics.iou_thresh = getd("metrics", "iou_thresh", c.metrics.iou_thresh);
    c.metrics.best_f1_step = getd("metrics", "best_f1_step", c.metrics.best_f1_step);

    c.backend = gets("annotate", "backend", c.backend);
    c.backend_checkpoint = gets("annotate", "checkpoint", c.backend_checkpoint.string());
    c.jitter_frac = getd("annotate", "jitter_frac", c.jitter_frac);

    c.validate();
    return c;
}

uint64_t ExperimentConfig::config_hash() const {
    // canonical form: sorted sections and keys (TomlTable is an ordered map)
    std::string s = dump_toml(to_toml());
    return fnv1a(s.data(), s.size());
}

std::string RunRecord::to_json() const {
    json j;
    j["config_hash"] = config_hash;
    j["stage_timestamps"] = stage_timestamps;
    j["artifacts"] = artifacts;
    j["environment"] = environment;
    j["config_toml"] = dump_toml(config.to_toml());
    return j.dump(2);
}

} // namespace moclseg
