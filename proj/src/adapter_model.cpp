#include "moclseg/adapter_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moclseg/data_ingest.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

namespace moclseg {

using nn::Tensor;
using nn::Var;
using json = nlohmann::json;

void EncoderConfig::validate() const {
    if (patch_size <= 0 || embed_dim <= 0 || depth <= 0 || num_heads <= 0 || input_size <= 0)
        throw ValidationError("encoder config: all dimensions must be positive");
    if (input_size % patch_size != 0)
        throw ValidationError("encoder config: input_size must be divisible by patch_size");
    if (embed_dim % num_heads != 0)
        throw ValidationError("encoder config: embed_dim must be divisible by num_heads");
}

void AdapterConfig::validate(const EncoderConfig& enc) const {
    if (bottleneck_dim <= 0 || bottleneck_dim >= enc.embed_dim)
        throw ValidationError("adapter config: bottleneck_dim must be in (0, embed_dim)");
    for (int b : inject_blocks)
        if (b < 0 || b >= enc.depth)
            throw ValidationError("adapter config: inject block index out of range");
    if (texture_sigma <= 0.0) throw ValidationError("adapter config: texture_sigma must be > 0");
    if (embed_channels <= 0) throw ValidationError("adapter config: embed_channels must be > 0");
}

cv::Mat extract_texture_features(const cv::Mat& image, double sigma) {
    if (sigma <= 0.0) throw ValidationError("texture sigma must be > 0");
    cv::Mat gray;
    if (image.channels() == 3)
        cv::cvtColor(image, gray, cv::COLOR_BGR2GRAY);
    else
        gray = image;
    cv::Mat g32;
    gray.convertTo(g32, CV_32F, 1.0 / 255.0);
    cv::Mat blurred;
    cv::GaussianBlur(g32, blurred, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);
    cv::Mat resid = g32 - blurred;
    cv::Scalar mu, sd;
    cv::meanStdDev(resid, mu, sd);
    double var = sd[0] * sd[0];
    if (var <= 0.0) return cv::Mat::zeros(resid.size(), CV_32F);
    return (resid - mu[0]) / sd[0];
}

namespace {

constexpr int kDecWidth = 32;   // decoder feature channels
constexpr int kStemWidth = 8;   // pixel stem channels
constexpr int kFuseWidth = 16;  // fused channels before the class head

Tensor conv_init(std::vector<int> shape, Rng& rng) {
    int fan_in = shape[1] * shape[2] * shape[3];
    return nn::randn(shape, rng, std::sqrt(2.0f / static_cast<float>(fan_in)));
}

} // namespace

AdapterModel AdapterModel::build(const EncoderConfig& enc_in, const AdapterConfig& ad_in,
                                 int num_classes, uint64_t seed) {
    EncoderConfig enc = enc_in;
    AdapterConfig ad = ad_in;
    enc.validate();
    if (ad.inject_blocks.empty())
        for (int i = enc.depth / 2; i < enc.depth; ++i) ad.inject_blocks.push_back(i);
    ad.validate(enc);
    if (num_classes <= 0) throw ValidationError("num_classes must be positive");

    AdapterModel m;
    m.enc = enc;
    m.ad = ad;
    m.num_classes = num_classes;

    int d = enc.embed_dim;
    int p2 = enc.patch_size * enc.patch_size;
    int n_tokens = enc.tokens_per_side() * enc.tokens_per_side();

    // independent init streams so adapter presence never shifts backbone or
    // decoder initialization
    Rng rb(seed ^ 0xbac0b0de);
    Rng rd(seed ^ 0xdec0dec0);
    Rng ra(seed ^ 0xada97e52);

    auto backbone = [&](Tensor t, const std::string& name) {
        m.all_params.push_back(nn::make_param(std::move(t), "backbone." + name));
        m.all_params.back()->requires_grad = false; // frozen
    };
    auto trainable = [&](Tensor t, const std::string& name) {
        m.all_params.push_back(nn::make_param(std::move(t), name));
    };
    auto ones = [](std::vector<int> s) {
        Tensor t(std::move(s));
        t.fill(1.0f);
        return t;
    };

    backbone(nn::randn({p2 * 3, d}, rb, 0.02f), "patch_embed.w");
    backbone(nn::zeros({d}), "patch_embed.b");
    backbone(nn::randn({n_tokens, d}, rb, 0.02f), "pos_embed");
    for (int i = 0; i < enc.depth; ++i) {
        std::string bp = "block" + std::to_string(i) + ".";
        backbone(ones({d}), bp + "ln1.g");
        backbone(nn::zeros({d}), bp + "ln1.b");
        backbone(nn::randn({d, 3 * d}, rb, 0.02f), bp + "attn.wqkv");
        backbone(nn::zeros({3 * d}), bp + "attn.bqkv");
        backbone(nn::randn({d, d}, rb, 0.02f), bp + "attn.wo");
        backbone(nn::zeros({d}), bp + "attn.bo");
        backbone(ones({d}), bp + "ln2.g");
        backbone(nn::zeros({d}), bp + "ln2.b");
        backbone(nn::randn({d, 4 * d}, rb, 0.02f), bp + "ffn.w1");
        backbone(nn::zeros({4 * d}), bp + "ffn.b1");
        backbone(nn::randn({4 * d, d}, rb, 0.02f), bp + "ffn.w2");
        backbone(nn::zeros({d}), bp + "ffn.b2");
    }

    // adapters: one unit after the attention sublayer and one after the
    // feed-forward sublayer of every injected block; up-projections start at
    // zero so a fresh model computes exactly the backbone function
    int bdim = ad.bottleneck_dim;
    for (int i : ad.inject_blocks) {
        for (const char* sub : {"attn", "ffn"}) {
            std::string apx = "adapter.block" + std::to_string(i) + "." + sub + ".";
            trainable(nn::randn({d, bdim}, ra, 0.02f), apx + "wd");
            trainable(nn::zeros({bdim}), apx + "bd");
            trainable(nn::zeros({bdim, d}), apx + "wu");
            trainable(nn::zeros({d}), apx + "bu");
            m.adapter_units_++;
        }
        std::string tpx = "adapter.block" + std::to_string(i) + ".tex.";
        trainable(nn::zeros({p2, d}), tpx + "w");
        trainable(nn::zeros({d}), tpx + "b");
    }

    // decoder
    trainable(nn::randn({d, kDecWidth}, rd, 0.05f), "decoder.tok.w");
    trainable(nn::zeros({kDecWidth}), "decoder.tok.b");
    trainable(conv_init({kDecWidth, kDecWidth, 3, 3}, rd), "decoder.up1.w");
    trainable(nn::zeros({kDecWidth}), "decoder.up1.b");
    trainable(conv_init({kDecWidth, kDecWidth, 3, 3}, rd), "decoder.up2.w");
    trainable(nn::zeros({kDecWidth}), "decoder.up2.b");
    trainable(conv_init({ad.embed_channels, kDecWidth, 1, 1}, rd), "decoder.embed.w");
    trainable(nn::zeros({ad.embed_channels}), "decoder.embed.b");
    trainable(conv_init({kStemWidth, 3, 3, 3}, rd), "decoder.stem1.w");
    trainable(nn::zeros({kStemWidth}), "decoder.stem1.b");
    trainable(conv_init({kStemWidth, kStemWidth, 3, 3}, rd), "decoder.stem2.w");
    trainable(nn::zeros({kStemWidth}), "decoder.stem2.b");
    trainable(conv_init({kFuseWidth, kDecWidth + kStemWidth, 1, 1}, rd), "decoder.fuse.w");
    trainable(nn::zeros({kFuseWidth}), "decoder.fuse.b");
    trainable(conv_init({num_classes, kFuseWidth, 1, 1}, rd), "decoder.head.w");
    trainable(nn::zeros({num_classes}), "decoder.head.b");

    for (int c = 0; c < num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));
    return m;
}

Var AdapterModel::param(const std::string& name) const {
    for (const auto& p : all_params)
        if (p->name == name) return p;
    throw std::logic_error("missing parameter: " + name);
}

std::vector<Var> AdapterModel::trainable_params() const {
    std::vector<Var> out;
    for (const auto& p : all_params)
        if (p->requires_grad) out.push_back(p);
    return out;
}

std::vector<Var> AdapterModel::backbone_params() const {
    std::vector<Var> out;
    for (const auto& p : all_params)
        if (!p->requires_grad) out.push_back(p);
    return out;
}

uint64_t AdapterModel::backbone_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : all_params) {
        if (p->requires_grad) continue;
        h = fnv1a(p->name.data(), p->name.size(), h);
        h = fnv1a(p->value.data.data(), p->value.data.size() * sizeof(float), h);
    }
    return h;
}

namespace {

// {N, p*p*C} patch matrix from a CHW float tensor of shape {C, S, S}
Tensor unfold_patches(const std::vector<cv::Mat>& chans, int patch) {
    int s = chans[0].rows;
    int t = s / patch;
    int n = t * t;
    int c = static_cast<int>(chans.size());
    Tensor out({n, patch * patch * c});
    for (int ty = 0; ty < t; ++ty)
        for (int tx = 0; tx < t; ++tx) {
            float* row = out.data.data() + static_cast<size_t>(ty * t + tx) * patch * patch * c;
            int idx = 0;
            for (int ci = 0; ci < c; ++ci)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        row[idx++] = chans[static_cast<size_t>(ci)].at<float>(ty * patch + py,
                                                                              tx * patch + px);
        }
    return out;
}

} // namespace

Var ForwardResult::class_prob(int c) const {
    int C = prob->value.dim(0), h = prob->value.dim(1), w = prob->value.dim(2);
    if (c < 0 || c >= C) throw ValidationError("class index out of range");
    auto flat = nn::reshape(prob, {C, h * w});
    auto t = nn::transpose2d(flat);
    auto col = nn::slice_cols(t, c, c + 1);
    return nn::reshape(col, {h, w});
}

ForwardResult AdapterModel::forward(const cv::Mat& image) const {
    if (image.rows != enc.input_size || image.cols != enc.input_size || image.type() != CV_8UC3)
        throw ValidationError("forward: expected " + std::to_string(enc.input_size) + "x" +
                              std::to_string(enc.input_size) + " 8-bit color image");
    int d = enc.embed_dim;
    int t = enc.tokens_per_side();
    int n = t * t;
    int heads = enc.num_heads;
    int dh = d / heads;

    std::vector<cv::Mat> chans(3);
    cv::split(image, chans);
    std::vector<cv::Mat> fchans(3);
    for (int i = 0; i < 3; ++i) chans[static_cast<size_t>(i)].convertTo(fchans[static_cast<size_t>(i)], CV_32F, 1.0 / 255.0, -0.5);

    Var patches = nn::constant(unfold_patches(fchans, enc.patch_size));
    Var x = nn::add(nn::add_rowwise(nn::matmul(patches, param("backbone.patch_embed.w")),
                                    param("backbone.patch_embed.b")),
                    param("backbone.pos_embed"));

    cv::Mat tex = extract_texture_features(image, ad.texture_sigma);
    Var tex_patches = nn::constant(unfold_patches({tex}, enc.patch_size));

    auto has_adapter = [&](int i) {
        return std::find(ad.inject_blocks.begin(), ad.inject_blocks.end(), i) !=
               ad.inject_blocks.end();
    };
    auto adapter_residual = [&](Var h, const std::string& prefix) {
        auto down = nn::relu(nn::add_rowwise(nn::matmul(h, param(prefix + ".wd")), param(prefix + ".bd")));
        auto up = nn::add_rowwise(nn::matmul(down, param(prefix + ".wu")), param(prefix + ".bu"));
        return nn::add(h, up);
    };

    for (int i = 0; i < enc.depth; ++i) {
        std::string bp = "backbone.block" + std::to_string(i) + ".";
        if (has_adapter(i)) {
            std::string tpx = "adapter.block" + std::to_string(i) + ".tex.";
            auto tex_emb = nn::add_rowwise(nn::matmul(tex_patches, param(tpx + "w")), param(tpx + "b"));
            x = nn::add(x, tex_emb);
        }
        // attention sublayer
        auto h = nn::layer_norm(x, param(bp + "ln1.g"), param(bp + "ln1.b"));
        auto qkv = nn::add_rowwise(nn::matmul(h, param(bp + "attn.wqkv")), param(bp + "attn.bqkv"));
        std::vector<Var> head_outs;
        for (int hd = 0; hd < heads; ++hd) {
            auto q = nn::slice_cols(qkv, hd * dh, (hd + 1) * dh);
            auto k = nn::slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
            auto v = nn::slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
            auto att = nn::softmax_rows(
                nn::scale(nn::matmul(q, nn::transpose2d(k)), 1.0f / std::sqrt(static_cast<float>(dh))));
            head_outs.push_back(nn::matmul(att, v));
        }
        auto attn_out = nn::add_rowwise(nn::matmul(nn::concat_cols(head_outs), param(bp + "attn.wo")),
                                        param(bp + "attn.bo"));
        x = nn::add(x, attn_out);
        if (has_adapter(i)) x = adapter_residual(x, "adapter.block" + std::to_string(i) + ".attn");
        // feed-forward sublayer
        auto h2 = nn::layer_norm(x, param(bp + "ln2.g"), param(bp + "ln2.b"));
        auto ff = nn::add_rowwise(
            nn::matmul(nn::gelu(nn::add_rowwise(nn::matmul(h2, param(bp + "ffn.w1")), param(bp + "ffn.b1"))),
                       param(bp + "ffn.w2")),
            param(bp + "ffn.b2"));
        x = nn::add(x, ff);
        if (has_adapter(i)) x = adapter_residual(x, "adapter.block" + std::to_string(i) + ".ffn");
    }
    (void)n;

    // decoder: tokens -> grid -> two upsample stages -> embedding head at the
    // last feature layer; a shallow full-resolution stem recovers pixel detail
    auto tok = nn::relu(nn::add_rowwise(nn::matmul(x, param("decoder.tok.w")), param("decoder.tok.b")));
    auto f = nn::tokens_to_chw(tok, t, t);
    f = nn::relu(nn::conv2d(nn::upsample2x_bilinear(f), param("decoder.up1.w"), param("decoder.up1.b"), 1));
    f = nn::relu(nn::conv2d(nn::upsample2x_bilinear(f), param("decoder.up2.w"), param("decoder.up2.b"), 1));

    auto embeddings = nn::conv2d(f, param("decoder.embed.w"), param("decoder.embed.b"), 0);

    Tensor img_chw({3, enc.input_size, enc.input_size});
    for (int ci = 0; ci < 3; ++ci)
        for (int y = 0; y < enc.input_size; ++y)
            for (int xx = 0; xx < enc.input_size; ++xx)
                img_chw.data[(static_cast<size_t>(ci) * enc.input_size + y) * enc.input_size + xx] =
                    fchans[static_cast<size_t>(ci)].at<float>(y, xx);
    auto stem = nn::relu(nn::conv2d(nn::constant(std::move(img_chw)), param("decoder.stem1.w"),
                                    param("decoder.stem1.b"), 1));
    stem = nn::relu(nn::conv2d(stem, param("decoder.stem2.w"), param("decoder.stem2.b"), 1));

    // bring f to full resolution (two more x2 steps depending on patch size)
    auto ff_full = f;
    while (ff_full->value.dim(1) < enc.input_size) ff_full = nn::upsample2x_bilinear(ff_full);
    auto fused = nn::relu(nn::conv2d(nn::concat_chan(ff_full, stem), param("decoder.fuse.w"),
                                     param("decoder.fuse.b"), 0));
    auto prob = nn::sigmoid(nn::conv2d(fused, param("decoder.head.w"), param("decoder.head.b"), 0));

    ForwardResult r;
    r.prob = prob;
    r.embeddings = embeddings;
    return r;
}

PredictionOutput AdapterModel::predict(const cv::Mat& image) const {
    ForwardResult r = forward(image);
    PredictionOutput out;
    int C = r.prob->value.dim(0), h = r.prob->value.dim(1), w = r.prob->value.dim(2);
    for (int c = 0; c < C; ++c) {
        cv::Mat m(h, w, CV_32F);
        std::copy_n(r.prob->value.data.data() + static_cast<size_t>(c) * h * w,
                    static_cast<size_t>(h) * w, reinterpret_cast<float*>(m.data));
        out.prob.push_back(m);
    }
    out.embeddings = r.embeddings->value;
    return out;
}

std::vector<cv::Mat> AdapterModel::predict_tiled(const cv::Mat& image) const {
    if (image.rows == enc.input_size && image.cols == enc.input_size) return predict(image).prob;
    if (image.rows < enc.input_size || image.cols < enc.input_size)
        throw ValidationError("image smaller than model input size");
    auto tiles = tile_image(image.rows, image.cols, enc.input_size, enc.input_size);
    std::vector<cv::Mat> acc(static_cast<size_t>(num_classes));
    cv::Mat count = cv::Mat::zeros(image.size(), CV_32F);
    for (auto& a : acc) a = cv::Mat::zeros(image.size(), CV_32F);
    for (const auto& tc : tiles) {
        cv::Rect roi(tc.x, tc.y, enc.input_size, enc.input_size);
        auto p = predict(image(roi).clone());
        for (int c = 0; c < num_classes; ++c) acc[static_cast<size_t>(c)](roi) += p.prob[static_cast<size_t>(c)];
        count(roi) += 1.0f;
    }
    for (auto& a : acc) a /= count;
    return acc;
}

// ---- checkpoint archive ----
// Layout: magic, u32 version, u64 header length, JSON header (tensor names,
// shapes, frozen flags, model config), float32 payload in header order.

namespace {
constexpr char kMagic[8] = {'M', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
}

void AdapterModel::save(const fs::path& checkpoint) const {
    json hdr;
    hdr["num_classes"] = num_classes;
    hdr["class_names"] = class_names;
    hdr["encoder"] = {{"patch_size", enc.patch_size}, {"embed_dim", enc.embed_dim},
                      {"depth", enc.depth},           {"num_heads", enc.num_heads},
                      {"input_size", enc.input_size}};
    hdr["adapter"] = {{"bottleneck_dim", ad.bottleneck_dim},
                      {"inject_blocks", ad.inject_blocks},
                      {"texture_sigma", ad.texture_sigma},
                      {"embed_channels", ad.embed_channels}};
    hdr["tensors"] = json::array();
    for (const auto& p : all_params)
        hdr["tensors"].push_back(
            {{"name", p->name}, {"shape", p->value.shape}, {"frozen", !p->requires_grad}});
    std::string hs = hdr.dump();

    std::ofstream out(checkpoint, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + checkpoint.string());
    uint32_t version = 1;
    uint64_t hlen = hs.size();
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : all_params)
        out.write(reinterpret_cast<const char*>(p->value.data.data()),
                  static_cast<std::streamsize>(p->value.data.size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + checkpoint.string());

    // JSON config sidecar
    std::ofstream side(checkpoint.string() + ".json");
    side << hdr.dump(2) << "\n";
}

namespace {

json read_archive_header(std::ifstream& in, const fs::path& checkpoint) {
    char magic[8];
    uint32_t version;
    uint64_t hlen;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("not a checkpoint archive: " + checkpoint.string());
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated checkpoint: " + checkpoint.string());
    return json::parse(hs);
}

} // namespace

AdapterModel AdapterModel::load(const fs::path& checkpoint) {
    std::ifstream in(checkpoint, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + checkpoint.string());
    json hdr = read_archive_header(in, checkpoint);

    EncoderConfig enc;
    const auto& je = hdr.at("encoder");
    enc.patch_size = je.at("patch_size");
    enc.embed_dim = je.at("embed_dim");
    enc.depth = je.at("depth");
    enc.num_heads = je.at("num_heads");
    enc.input_size = je.at("input_size");
    AdapterConfig ad;
    const auto& ja = hdr.at("adapter");
    ad.bottleneck_dim = ja.at("bottleneck_dim");
    ad.inject_blocks = ja.at("inject_blocks").get<std::vector<int>>();
    ad.texture_sigma = ja.at("texture_sigma");
    ad.embed_channels = ja.at("embed_channels");

    AdapterModel m = build(enc, ad, hdr.at("num_classes"), 0);
    m.class_names = hdr.at("class_names").get<std::vector<std::string>>();

    for (const auto& jt : hdr.at("tensors")) {
        std::string name = jt.at("name");
        std::vector<int> shape = jt.at("shape").get<std::vector<int>>();
        Var p = m.param(name);
        if (p->value.shape != shape)
            throw IoError("checkpoint tensor shape mismatch: " + name);
        in.read(reinterpret_cast<char*>(p->value.data.data()),
                static_cast<std::streamsize>(p->value.data.size() * sizeof(float)));
        if (!in) throw IoError("truncated checkpoint payload: " + checkpoint.string());
    }
    return m;
}

void AdapterModel::load_pretrained_backbone(const fs::path& checkpoint) {
    std::ifstream in(checkpoint, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + checkpoint.string());
    json hdr = read_archive_header(in, checkpoint);

    std::vector<std::string> offending;
    for (const auto& jt : hdr.at("tensors")) {
        std::string name = jt.at("name");
        std::vector<int> shape = jt.at("shape").get<std::vector<int>>();
        int64_t numel = Tensor::numel_of(shape);
        if (name.rfind("backbone.", 0) != 0) {
            in.seekg(numel * static_cast<int64_t>(sizeof(float)), std::ios::cur);
            continue;
        }
        Var p;
        try {
            p = param(name);
        } catch (const std::logic_error&) {
            offending.push_back(name + " (no such backbone tensor)");
            in.seekg(numel * static_cast<int64_t>(sizeof(float)), std::ios::cur);
            continue;
        }
        if (p->value.shape != shape) {
            std::ostringstream os;
            os << name << " (shape mismatch)";
            offending.push_back(os.str());
            in.seekg(numel * static_cast<int64_t>(sizeof(float)), std::ios::cur);
            continue;
        }
        in.read(reinterpret_cast<char*>(p->value.data.data()),
                static_cast<std::streamsize>(p->value.data.size() * sizeof(float)));
    }
    if (!offending.empty()) {
        std::string msg = "backbone load error:";
        for (const auto& s : offending) msg += " " + s + ";";
        throw IoError(msg);
    }
}

// ---- training ----

AdamOptimizer::AdamOptimizer(std::vector<Var> params, double lr, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p->value.data.size(), 0.0f);
        v_.emplace_back(p->value.data.size(), 0.0f);
    }
}

void AdamOptimizer::zero_grad() { nn::zero_grad(params_); }

void AdamOptimizer::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Var& p = params_[pi];
        if (p->grad.data.empty()) continue;
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            float g = p->grad.data[i];
            m[i] = static_cast<float>(beta1_) * m[i] + static_cast<float>(1.0 - beta1_) * g;
            v[i] = static_cast<float>(beta2_) * v[i] + static_cast<float>(1.0 - beta2_) * g * g;
            double mh = m[i] / bc1;
            double vh = v[i] / bc2;
            p->value.data[i] -= static_cast<float>(lr_ * mh / (std::sqrt(vh) + eps_));
        }
    }
}

nn::Var plain_dice_bce(const nn::Var& class_prob, const cv::Mat& target, int) {
    int h = class_prob->value.dim(0), w = class_prob->value.dim(1);
    Tensor y({h, w});
    Tensor omega({h, w});
    omega.fill(1.0f);
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
            y.at(static_cast<int64_t>(yy) * w + xx) = target.at<uint8_t>(yy, xx) ? 1.0f : 0.0f;
    return nn::weighted_dice_bce_loss(class_prob, y, omega);
}

namespace {

double binary_dice(const cv::Mat& a, const cv::Mat& b) {
    double inter = 0, sa = 0, sb = 0;
    for (int y = 0; y < a.rows; ++y)
        for (int x = 0; x < a.cols; ++x) {
            bool pa = a.at<uint8_t>(y, x) != 0, pb = b.at<uint8_t>(y, x) != 0;
            inter += pa && pb;
            sa += pa;
            sb += pb;
        }
    if (sa + sb == 0) return 1.0;
    return 2.0 * inter / (sa + sb);
}

std::vector<Tensor> snapshot(const std::vector<Var>& params) {
    std::vector<Tensor> out;
    for (const auto& p : params) out.push_back(p->value);
    return out;
}

void restore(std::vector<Var>& params, const std::vector<Tensor>& snap) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

} // namespace

double eval_mean_dice(const AdapterModel& model, const std::vector<TrainSample>& samples,
                      double threshold) {
    if (samples.empty()) return 0.0;
    double total = 0.0;
    int count = 0;
    for (const auto& s : samples) {
        auto p = model.predict(s.image);
        for (int c = 0; c < model.num_classes; ++c) {
            cv::Mat pred = p.prob[static_cast<size_t>(c)] > threshold;
            pred /= 255;
            total += binary_dice(pred, s.targets[static_cast<size_t>(c)]);
            ++count;
        }
    }
    return total / count;
}

TrainingHistory train_adapter(AdapterModel& model, const std::vector<TrainSample>& train,
                              const std::vector<TrainSample>& val, const Hyperparams& hp,
                              const ClassLossFn& loss) {
    TrainingHistory hist;
    if (hp.epochs == 0) return hist;
    if (train.empty()) throw ValidationError("empty training split");

    auto params = model.trainable_params();
    AdamOptimizer opt(params, hp.learning_rate);
    uint64_t hash_before = model.backbone_hash();

    double best_dice = -1.0;
    std::vector<Tensor> best_snap;
    int since_best = 0;

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        Rng rng(hp.seed + static_cast<uint64_t>(epoch) * 7919);
        rng.shuffle(order);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(hp.batch_size)) {
            opt.zero_grad();
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(hp.batch_size));
            Var batch_loss;
            int terms = 0;
            for (size_t bi = b0; bi < b1; ++bi) {
                const TrainSample& s = train[order[bi]];
                ForwardResult fr = model.forward(s.image);
                for (int c = 0; c < model.num_classes; ++c) {
                    Var l = loss(fr.class_prob(c), s.targets[static_cast<size_t>(c)], c);
                    batch_loss = batch_loss ? nn::add(batch_loss, l) : l;
                    ++terms;
                }
            }
            batch_loss = nn::scale(batch_loss, 1.0f / static_cast<float>(terms));
            float lv = batch_loss->value.at(0);
            if (!std::isfinite(lv))
                throw StageError("training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
            nn::backward(batch_loss);
            opt.step();
            epoch_loss += lv;
            ++n_batches;
        }
        hist.train_loss.push_back(epoch_loss / n_batches);

        const auto& eval_set = val.empty() ? train : val;
        double vloss = 0.0;
        int vterms = 0;
        for (const auto& s : eval_set) {
            ForwardResult fr = model.forward(s.image);
            for (int c = 0; c < model.num_classes; ++c) {
                vloss += loss(fr.class_prob(c), s.targets[static_cast<size_t>(c)], c)->value.at(0);
                ++vterms;
            }
        }
        hist.val_loss.push_back(vloss / vterms);
        double vdice = eval_mean_dice(model, eval_set);
        hist.val_dice.push_back(vdice);

        if (vdice > best_dice) {
            best_dice = vdice;
            best_snap = snapshot(params);
            hist.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= hp.patience) {
            break;
        }
    }
    if (!best_snap.empty()) restore(params, best_snap);
    if (model.backbone_hash() != hash_before)
        throw StageError("frozen backbone changed during training");
    return hist;
}

} // namespace moclseg
