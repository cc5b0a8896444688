#include "moclseg/mocl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

namespace moclseg {

using nn::Tensor;
using nn::Var;

ConfidenceMap confidence_map(const std::vector<cv::Mat>& prob, int class_index) {
    if (class_index < 0 || class_index >= static_cast<int>(prob.size()))
        throw ValidationError("confidence_map: class index out of range");
    return ConfidenceMap{prob[static_cast<size_t>(class_index)].clone()};
}

TopKSelection select_topk(const Tensor& embeddings, const ConfidenceMap& w, const cv::Mat& y,
                          int k, const std::string& class_name) {
    if (k < 1) throw ValidationError("select_topk: k must be >= 1");
    if (embeddings.ndim() != 3) throw ValidationError("select_topk: embeddings must be {M,H,W}");
    int m = embeddings.dim(0), gh = embeddings.dim(1), gw = embeddings.dim(2);

    // nearest-neighbor resample of Y and W onto the embedding grid
    auto src_index = [](int g, int gn, int n) {
        int i = static_cast<int>((static_cast<double>(g) + 0.5) * n / gn);
        return std::clamp(i, 0, n - 1);
    };
    int ih = y.rows, iw = y.cols;

    struct Cand {
        float conf;
        int row, col;
    };
    std::vector<Cand> cands;
    for (int r = 0; r < gh; ++r) {
        int sy = src_index(r, gh, ih);
        for (int c = 0; c < gw; ++c) {
            int sx = src_index(c, gw, iw);
            if (y.at<uint8_t>(sy, sx) == 0) continue;
            cands.push_back({w.w.at<float>(sy, sx), r, c});
        }
    }
    if (cands.empty())
        throw ValidationError("select_topk: annotation is empty on the embedding grid");

    // stable on row-major order, so confidence ties break deterministically
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.conf > b.conf; });
    size_t keep = std::min(cands.size(), static_cast<size_t>(k));

    TopKSelection sel;
    sel.k_requested = k;
    sel.class_name = class_name;
    for (size_t i = 0; i < keep; ++i) {
        TopKEntry e;
        e.confidence = cands[i].conf;
        e.row = cands[i].row;
        e.col = cands[i].col;
        e.embedding.resize(static_cast<size_t>(m));
        for (int ch = 0; ch < m; ++ch)
            e.embedding[static_cast<size_t>(ch)] =
                embeddings.data[(static_cast<size_t>(ch) * gh + cands[i].row) * gw + cands[i].col];
        sel.entries.push_back(std::move(e));
    }
    return sel;
}

namespace {

double cosine(const float* a, const float* b, int m, size_t stride_a, size_t stride_b) {
    double dot = 0, na = 0, nb = 0;
    for (int ch = 0; ch < m; ++ch) {
        double va = a[static_cast<size_t>(ch) * stride_a];
        double vb = b[static_cast<size_t>(ch) * stride_b];
        dot += va * vb;
        na += va * va;
        nb += vb * vb;
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

SimilarityMap similarity_map(const Tensor& embeddings, const TopKSelection& sel, int out_h,
                             int out_w, TopKAggregation agg) {
    if (sel.entries.empty()) throw ValidationError("similarity_map: empty selection");
    int m = embeddings.dim(0), gh = embeddings.dim(1), gw = embeddings.dim(2);
    size_t plane = static_cast<size_t>(gh) * gw;

    std::vector<float> ref_mean;
    if (agg == TopKAggregation::mean_embedding) {
        ref_mean.assign(static_cast<size_t>(m), 0.0f);
        for (const auto& e : sel.entries)
            for (int ch = 0; ch < m; ++ch) ref_mean[static_cast<size_t>(ch)] += e.embedding[static_cast<size_t>(ch)];
        for (auto& v : ref_mean) v /= static_cast<float>(sel.entries.size());
    }

    cv::Mat grid(gh, gw, CV_64F);
    for (int r = 0; r < gh; ++r)
        for (int c = 0; c < gw; ++c) {
            const float* e_i = embeddings.data.data() + static_cast<size_t>(r) * gw + c;
            double s;
            if (agg == TopKAggregation::mean_embedding) {
                s = cosine(e_i, ref_mean.data(), m, plane, 1);
            } else {
                double acc = 0;
                for (const auto& e : sel.entries) acc += cosine(e_i, e.embedding.data(), m, plane, 1);
                s = acc / static_cast<double>(sel.entries.size());
            }
            grid.at<double>(r, c) = s;
        }

    SimilarityMap out;
    if (out_h == gh && out_w == gw)
        out.s = grid;
    else
        cv::resize(grid, out.s, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
    // bilinear interpolation stays within the hull of [-1,1] values
    return out;
}

WeightMaps weight_maps(const ConfidenceMap& w, const SimilarityMap& s, const cv::Mat& y,
                       double eps_floor) {
    if (w.w.size() != s.s.size() || w.w.size() != y.size())
        throw ValidationError("weight_maps: shape mismatch");
    if (eps_floor < 0.0) throw ValidationError("weight_maps: eps_floor must be >= 0");
    WeightMaps out;
    out.eps_floor = eps_floor;
    out.omega_w.create(y.size(), CV_32F);
    out.omega_s.create(y.size(), CV_32F);
    for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) {
            if (y.at<uint8_t>(r, c)) {
                out.omega_w.at<float>(r, c) = std::exp(w.w.at<float>(r, c));
                out.omega_s.at<float>(r, c) = static_cast<float>(s.s.at<double>(r, c));
            } else {
                out.omega_w.at<float>(r, c) = static_cast<float>(eps_floor);
                out.omega_s.at<float>(r, c) = static_cast<float>(eps_floor);
            }
        }
    return out;
}

namespace {

void combined_weight_and_y(const cv::Mat& y, const WeightMaps& wm, Tensor& ty, Tensor& omega) {
    int h = y.rows, w = y.cols;
    ty = Tensor({h, w});
    omega = Tensor({h, w});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            ty.at(static_cast<int64_t>(r) * w + c) = y.at<uint8_t>(r, c) ? 1.0f : 0.0f;
            omega.at(static_cast<int64_t>(r) * w + c) =
                wm.omega_w.at<float>(r, c) * wm.omega_s.at<float>(r, c);
        }
}

} // namespace

Var mocl_loss_var(const Var& class_prob, const cv::Mat& y, const WeightMaps& wm) {
    Tensor ty, omega;
    combined_weight_and_y(y, wm, ty, omega);
    return nn::weighted_dice_bce_loss(class_prob, ty, omega);
}

namespace {

constexpr double kClamp = 1e-7;
constexpr double kEpsDice = 1.0;

struct LossSums {
    double wpy = 0, wp = 0, wy = 0, w = 0, wbce = 0;
};

// prob may be CV_32F or CV_64F (the latter for high-precision callers)
double prob_at(const cv::Mat& prob, int r, int c) {
    return prob.depth() == CV_64F ? prob.at<double>(r, c)
                                  : static_cast<double>(prob.at<float>(r, c));
}

LossSums loss_sums(const cv::Mat& y, const cv::Mat& prob, const WeightMaps& wm) {
    if (y.size() != prob.size() || y.size() != wm.omega_w.size())
        throw ValidationError("mocl_loss: shape mismatch");
    LossSums s;
    for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) {
            double w = static_cast<double>(wm.omega_w.at<float>(r, c)) * wm.omega_s.at<float>(r, c);
            double yi = y.at<uint8_t>(r, c) ? 1.0 : 0.0;
            double pi = std::clamp(prob_at(prob, r, c), kClamp, 1.0 - kClamp);
            s.wpy += w * pi * yi;
            s.wp += w * pi;
            s.wy += w * yi;
            s.w += w;
            s.wbce += w * (-(yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi)));
        }
    if (s.w <= 0.0)
        throw ValidationError("mocl_loss: total weight is zero (use eps_floor > 0 or skip)");
    return s;
}

} // namespace

// Value and analytic gradient are evaluated in double precision so finite
// differences with small h remain meaningful; the autodiff counterpart
// (mocl_loss_var) carries the same formulas through the float tape.
double mocl_loss(const cv::Mat& y, const cv::Mat& prob, const WeightMaps& wm) {
    LossSums s = loss_sums(y, prob, wm);
    double dice_loss = 1.0 - (2.0 * s.wpy + kEpsDice) / (s.wp + s.wy + kEpsDice);
    double bce = s.wbce / std::max(s.w, kEpsDice);
    return dice_loss + bce;
}

cv::Mat mocl_loss_grad(const cv::Mat& y, const cv::Mat& prob, const WeightMaps& wm) {
    LossSums s = loss_sums(y, prob, wm);
    double num = 2.0 * s.wpy + kEpsDice;
    double denom = s.wp + s.wy + kEpsDice;
    double wnorm = std::max(s.w, kEpsDice);
    cv::Mat g(y.rows, y.cols, CV_64F);
    for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) {
            double raw = prob_at(prob, r, c);
            if (raw < kClamp || raw > 1.0 - kClamp) {
                g.at<double>(r, c) = 0.0; // clamped region
                continue;
            }
            double w = static_cast<double>(wm.omega_w.at<float>(r, c)) * wm.omega_s.at<float>(r, c);
            double yi = y.at<uint8_t>(r, c) ? 1.0 : 0.0;
            double ddice = -(2.0 * w * yi * denom - num * w) / (denom * denom);
            double dbce = w * ((1.0 - yi) / (1.0 - raw) - yi / raw) / wnorm;
            g.at<double>(r, c) = ddice + dbce;
        }
    return g;
}

RefineHistory refine(AdapterModel& model, const std::vector<TrainSample>& train,
                     const Hyperparams& hp, const MoclConfig& cfg,
                     const std::vector<TrainSample>& val) {
    RefineHistory hist;
    if (hp.epochs == 0) return hist;
    if (train.empty()) throw ValidationError("refine: empty training set");

    auto params = model.trainable_params();
    AdamOptimizer opt(params, hp.learning_rate);
    uint64_t hash_before = model.backbone_hash();

    // with a validation set, keep the best state; the pre-refinement model is
    // the baseline candidate
    auto snapshot = [&] {
        std::vector<std::vector<float>> s;
        for (const auto& p : params) s.push_back(p->value.data);
        return s;
    };
    std::vector<std::vector<float>> best_state;
    double best_dice = -1.0;
    if (!val.empty()) {
        best_state = snapshot();
        best_dice = eval_mean_dice(model, val);
    }

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        Rng rng(hp.seed + 0x5eedu + static_cast<uint64_t>(epoch) * 104729);
        rng.shuffle(order);
        double epoch_loss = 0.0;
        double om_fg = 0.0, om_bg = 0.0;
        int64_t n_fg = 0, n_bg = 0;
        int n_terms = 0;
        int used_images = 0;

        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(hp.batch_size)) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(hp.batch_size));
            opt.zero_grad();
            Var batch_loss;
            int terms = 0;
            for (size_t bi = b0; bi < b1; ++bi) {
                const TrainSample& s = train[order[bi]];
                ForwardResult fr = model.forward(s.image);
                // weight maps come from a detached snapshot of the prediction
                PredictionOutput snap;
                {
                    int C = fr.prob->value.dim(0), h = fr.prob->value.dim(1), w = fr.prob->value.dim(2);
                    for (int c = 0; c < C; ++c) {
                        cv::Mat mp(h, w, CV_32F);
                        std::copy_n(fr.prob->value.data.data() + static_cast<size_t>(c) * h * w,
                                    static_cast<size_t>(h) * w, reinterpret_cast<float*>(mp.data));
                        snap.prob.push_back(mp);
                    }
                    snap.embeddings = fr.embeddings->value;
                }
                bool any_class = false;
                for (int c = 0; c < model.num_classes; ++c) {
                    const cv::Mat& y = s.targets[static_cast<size_t>(c)];
                    if (cv::countNonZero(y) == 0) continue; // class absent in image
                    any_class = true;
                    ConfidenceMap w = confidence_map(snap.prob, c);
                    TopKSelection sel = select_topk(snap.embeddings, w, y, cfg.k,
                                                    model.class_names[static_cast<size_t>(c)]);
                    SimilarityMap sm =
                        similarity_map(snap.embeddings, sel, y.rows, y.cols, cfg.aggregation);
                    WeightMaps wm = weight_maps(w, sm, y, cfg.eps_floor);
                    for (int r = 0; r < y.rows; ++r)
                        for (int cc = 0; cc < y.cols; ++cc) {
                            double om = static_cast<double>(wm.omega_w.at<float>(r, cc)) *
                                        wm.omega_s.at<float>(r, cc);
                            if (y.at<uint8_t>(r, cc)) {
                                om_fg += om;
                                ++n_fg;
                            } else {
                                om_bg += om;
                                ++n_bg;
                            }
                        }
                    Var l = mocl_loss_var(fr.class_prob(c), y, wm);
                    batch_loss = batch_loss ? nn::add(batch_loss, l) : l;
                    ++terms;
                }
                if (any_class) ++used_images;
            }
            if (terms == 0) continue;
            batch_loss = nn::scale(batch_loss, 1.0f / static_cast<float>(terms));
            float lv = batch_loss->value.at(0);
            if (!std::isfinite(lv))
                throw StageError("refinement diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
            nn::backward(batch_loss);
            opt.step();
            epoch_loss += lv;
            n_terms++;
        }
        if (epoch == 0) {
            hist.images_skipped = static_cast<int>(train.size()) - used_images;
            if (used_images == 0)
                throw StageError("refinement impossible: every image lacks annotated classes");
        }
        hist.train_loss.push_back(n_terms ? epoch_loss / n_terms : 0.0);
        hist.mean_omega_fg.push_back(n_fg ? om_fg / static_cast<double>(n_fg) : 0.0);
        hist.mean_omega_bg.push_back(n_bg ? om_bg / static_cast<double>(n_bg) : 0.0);
        if (!val.empty()) {
            double d = eval_mean_dice(model, val);
            hist.val_dice.push_back(d);
            if (d > best_dice) {
                best_dice = d;
                best_state = snapshot();
                hist.best_epoch = epoch;
            }
        }
    }
    if (!val.empty())
        for (size_t i = 0; i < params.size(); ++i) params[i]->value.data = best_state[i];

    if (model.backbone_hash() != hash_before)
        throw StageError("frozen backbone changed during refinement");
    return hist;
}

} // namespace moclseg
