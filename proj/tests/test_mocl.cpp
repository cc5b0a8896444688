#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "moclseg/mocl.hpp"

using namespace moclseg;
using nn::Tensor;

namespace {

cv::Mat mask_of(int h, int w, const std::vector<uint8_t>& v) {
    cv::Mat m(h, w, CV_8UC1);
    for (int i = 0; i < h * w; ++i) m.at<uint8_t>(i / w, i % w) = v[static_cast<size_t>(i)];
    return m;
}

cv::Mat fmat_of(int h, int w, const std::vector<float>& v) {
    cv::Mat m(h, w, CV_32F);
    for (int i = 0; i < h * w; ++i) m.at<float>(i / w, i % w) = v[static_cast<size_t>(i)];
    return m;
}

// embeddings tensor {M, H, W} from per-channel row-major values
Tensor emb_of(int m, int h, int w, const std::vector<float>& v) {
    Tensor t({m, h, w});
    std::copy(v.begin(), v.end(), t.data.begin());
    return t;
}

Tensor random_emb(int m, int h, int w, Rng& rng) {
    Tensor t({m, h, w});
    for (auto& v : t.data) v = static_cast<float>(rng.next_uniform(-1.0, 1.0));
    return t;
}

// unweighted soft Dice + BCE, written independently of the library
double oracle_plain_dice_bce(const cv::Mat& y, const cv::Mat& prob) {
    double py = 0, sp = 0, sy = 0, bce = 0;
    int n = y.rows * y.cols;
    for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) {
            double yi = y.at<uint8_t>(r, c) ? 1.0 : 0.0;
            double pi = std::clamp(static_cast<double>(prob.at<float>(r, c)), 1e-7, 1.0 - 1e-7);
            py += pi * yi;
            sp += pi;
            sy += yi;
            bce += -(yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
        }
    return (1.0 - (2.0 * py + 1.0) / (sp + sy + 1.0)) + bce / n;
}

// weighted variant evaluated pixel by pixel, as the scalar reference; the
// per-pixel weight is the product of the two factor maps
double oracle_weighted(const cv::Mat& y, const cv::Mat& prob, const cv::Mat& omega_w,
                       const cv::Mat& omega_s) {
    double wpy = 0, wp = 0, wy = 0, w_sum = 0, wbce = 0;
    for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) {
            double w = static_cast<double>(omega_w.at<float>(r, c)) * omega_s.at<float>(r, c);
            double yi = y.at<uint8_t>(r, c) ? 1.0 : 0.0;
            double pi = std::clamp(static_cast<double>(prob.at<float>(r, c)), 1e-7, 1.0 - 1e-7);
            wpy += w * pi * yi;
            wp += w * pi;
            wy += w * yi;
            w_sum += w;
            wbce += w * -(yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
        }
    return (1.0 - (2.0 * wpy + 1.0) / (wp + wy + 1.0)) + wbce / std::max(w_sum, 1.0);
}

WeightMaps wm_from(const cv::Mat& omega_w, const cv::Mat& omega_s, double eps = 0.0) {
    WeightMaps wm;
    wm.omega_w = omega_w;
    wm.omega_s = omega_s;
    wm.eps_floor = eps;
    return wm;
}

} // namespace

TEST_CASE("confidence_map selects the class channel unchanged") {
    std::vector<cv::Mat> prob{fmat_of(2, 2, {0.1f, 0.4f, 0.7f, 1.0f}),
                              fmat_of(2, 2, {0, 0, 0, 0})};
    auto w = confidence_map(prob, 0);
    CHECK(w.w.at<float>(0, 0) == 0.1f);
    CHECK(w.w.at<float>(0, 1) == 0.4f);
    CHECK(w.w.at<float>(1, 0) == 0.7f);
    CHECK(w.w.at<float>(1, 1) == 1.0f);
    auto z = confidence_map(prob, 1);
    CHECK(cv::countNonZero(z.w != 0.0f) == 0);
    CHECK_THROWS_AS(confidence_map(prob, 2), ValidationError);
    CHECK_THROWS_AS(confidence_map(prob, -1), ValidationError);
}

TEST_CASE("select_topk hand case, clamping and empty annotation") {
    Rng rng(1);
    Tensor e = random_emb(3, 2, 2, rng);
    ConfidenceMap w{fmat_of(2, 2, {0.9f, 0.1f, 0.8f, 0.2f})};
    cv::Mat y = mask_of(2, 2, {1, 0, 1, 1});

    SUBCASE("k=2 picks (0,0) then (1,0)") {
        auto sel = select_topk(e, w, y, 2);
        REQUIRE(sel.entries.size() == 2);
        CHECK(sel.entries[0].row == 0);
        CHECK(sel.entries[0].col == 0);
        CHECK(sel.entries[0].confidence == 0.9f);
        CHECK(sel.entries[1].row == 1);
        CHECK(sel.entries[1].col == 0);
        CHECK(sel.entries[1].confidence == 0.8f);
        // embeddings are copied from the selected grid locations
        for (int ch = 0; ch < 3; ++ch)
            CHECK(sel.entries[0].embedding[static_cast<size_t>(ch)] ==
                  e.data[static_cast<size_t>(ch) * 4 + 0]);
    }
    SUBCASE("k larger than annotated count returns all annotated pixels") {
        auto sel = select_topk(e, w, y, 10);
        CHECK(sel.entries.size() == 3);
        CHECK(sel.k_requested == 10);
    }
    SUBCASE("all-zero annotation raises") {
        cv::Mat empty = mask_of(2, 2, {0, 0, 0, 0});
        CHECK_THROWS_AS(select_topk(e, w, empty, 2), ValidationError);
    }
    SUBCASE("k < 1 rejected") {
        CHECK_THROWS_AS(select_topk(e, w, y, 0), ValidationError);
    }
}

TEST_CASE("select_topk matches exhaustive sort oracle and is argsort-invariant") {
    Rng rng(7);
    for (int t = 0; t < 200; ++t) {
        int h = 2 + static_cast<int>(rng.next_below(5));
        int w = 2 + static_cast<int>(rng.next_below(5));
        int m = 1 + static_cast<int>(rng.next_below(4));
        Tensor e = random_emb(m, h, w, rng);
        cv::Mat conf(h, w, CV_32F);
        cv::Mat y(h, w, CV_8UC1);
        bool any = false;
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                // quantized confidences so ties exercise the stable ordering
                conf.at<float>(r, c) = static_cast<float>(rng.next_below(5)) / 4.0f;
                uint8_t yi = rng.next_double() < 0.5 ? 1 : 0;
                y.at<uint8_t>(r, c) = yi;
                any = any || yi;
            }
        if (!any) y.at<uint8_t>(0, 0) = 1;
        int k = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(h * w)));

        // oracle: enumerate annotated pixels in row-major order, stable sort
        // by confidence descending, truncate to k
        struct C {
            float v;
            int r, c;
        };
        std::vector<C> cand;
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                if (y.at<uint8_t>(r, c)) cand.push_back({conf.at<float>(r, c), r, c});
        std::stable_sort(cand.begin(), cand.end(), [](const C& a, const C& b) { return a.v > b.v; });
        cand.resize(std::min(cand.size(), static_cast<size_t>(k)));

        auto sel = select_topk(e, ConfidenceMap{conf}, y, k);
        REQUIRE(sel.entries.size() == cand.size());
        for (size_t i = 0; i < cand.size(); ++i) {
            CHECK(sel.entries[i].row == cand[i].r);
            CHECK(sel.entries[i].col == cand[i].c);
            CHECK(sel.entries[i].confidence == cand[i].v);
            CHECK(y.at<uint8_t>(sel.entries[i].row, sel.entries[i].col) == 1);
        }
        // strictly monotone transform of W preserves the selection
        cv::Mat conf2 = conf * 0.5f + 0.1f;
        auto sel2 = select_topk(e, ConfidenceMap{conf2}, y, k);
        REQUIRE(sel2.entries.size() == sel.entries.size());
        for (size_t i = 0; i < sel.entries.size(); ++i) {
            CHECK(sel2.entries[i].row == sel.entries[i].row);
            CHECK(sel2.entries[i].col == sel.entries[i].col);
        }
    }
}

TEST_CASE("select_topk resamples Y and W to the embedding grid") {
    // embedding grid 2x2, image 4x4 in 2x2 constant blocks
    Rng rng(9);
    Tensor e = random_emb(2, 2, 2, rng);
    cv::Mat y = cv::Mat::zeros(4, 4, CV_8UC1);
    y(cv::Rect(0, 0, 2, 2)).setTo(1); // only the top-left grid cell annotated
    cv::Mat conf = cv::Mat::zeros(4, 4, CV_32F);
    conf(cv::Rect(0, 0, 2, 2)).setTo(0.7f);
    auto sel = select_topk(e, ConfidenceMap{conf}, y, 4);
    REQUIRE(sel.entries.size() == 1);
    CHECK(sel.entries[0].row == 0);
    CHECK(sel.entries[0].col == 0);
    CHECK(sel.entries[0].confidence == 0.7f);
}

TEST_CASE("similarity_map hand values") {
    // grid 1x3, M=2: pixels (1,0), (0,1), (1,1); reference = the (1,1) pixel
    Tensor e = emb_of(2, 1, 3, {1, 0, 1, /* channel 1: */ 0, 1, 1});
    ConfidenceMap w{fmat_of(1, 3, {0.5f, 0.5f, 0.9f})};
    cv::Mat y = mask_of(1, 3, {0, 0, 1});
    auto sel = select_topk(e, w, y, 1);
    REQUIRE(sel.entries.size() == 1);
    auto sm = similarity_map(e, sel, 1, 3);
    CHECK(sm.s.type() == CV_64F);
    // (1,0) vs (1,1): cosine = 1/sqrt(2)
    CHECK(std::fabs(sm.s.at<double>(0, 0) - 1.0 / std::sqrt(2.0)) < 1e-12);
    // (0,1) vs (1,1): also 1/sqrt(2)
    CHECK(std::fabs(sm.s.at<double>(0, 1) - 1.0 / std::sqrt(2.0)) < 1e-12);
    // self-similarity = 1
    CHECK(std::fabs(sm.s.at<double>(0, 2) - 1.0) < 1e-12);

    SUBCASE("orthogonal embedding scores 0 and zero-norm scores 0") {
        Tensor e2 = emb_of(2, 1, 3, {1, 0, 0, /* ch 1 */ 0, 0, 1});
        auto sel2 = select_topk(e2, w, y, 1); // reference = (0,1)
        auto sm2 = similarity_map(e2, sel2, 1, 3);
        CHECK(std::fabs(sm2.s.at<double>(0, 0)) < 1e-12); // (1,0) orthogonal to (0,1)
        CHECK(sm2.s.at<double>(0, 1) == 0.0);             // zero-norm pixel
    }
    SUBCASE("empty selection raises") {
        TopKSelection none;
        CHECK_THROWS_AS(similarity_map(e, none, 1, 3), ValidationError);
    }
}

TEST_CASE("similarity_map range, scale invariance and upsampling") {
    Rng rng(15);
    for (int t = 0; t < 50; ++t) {
        Tensor e = random_emb(4, 4, 4, rng);
        cv::Mat y(4, 4, CV_8UC1);
        cv::Mat conf(4, 4, CV_32F);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) {
                y.at<uint8_t>(r, c) = rng.next_double() < 0.5 ? 1 : 0;
                conf.at<float>(r, c) = static_cast<float>(rng.next_double());
            }
        y.at<uint8_t>(0, 0) = 1;
        auto sel = select_topk(e, ConfidenceMap{conf}, y, 3);
        auto sm = similarity_map(e, sel, 4, 4);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) {
                CHECK(sm.s.at<double>(r, c) >= -1.0 - 1e-12);
                CHECK(sm.s.at<double>(r, c) <= 1.0 + 1e-12);
            }

        // positive scaling of E leaves cosines unchanged (dyadic factors are
        // exact in float, isolating the mathematical property from rounding)
        for (float scale : {0.25f, 2.0f, 1024.0f}) {
            Tensor es = e;
            for (auto& v : es.data) v *= scale;
            auto sel_s = select_topk(es, ConfidenceMap{conf}, y, 3);
            auto sm_s = similarity_map(es, sel_s, 4, 4);
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c)
                    CHECK(std::fabs(sm_s.s.at<double>(r, c) - sm.s.at<double>(r, c)) < 1e-9);
        }

        // bilinear upsampling stays inside the value hull
        auto big = similarity_map(e, sel, 8, 8);
        CHECK(big.s.rows == 8);
        CHECK(big.s.cols == 8);
        double lo, hi;
        cv::minMaxLoc(sm.s, &lo, &hi);
        double blo, bhi;
        cv::minMaxLoc(big.s, &blo, &bhi);
        CHECK(blo >= lo - 1e-9);
        CHECK(bhi <= hi + 1e-9);
    }

    SUBCASE("mean-embedding aggregation gives 1 on a constant field") {
        Tensor e({2, 2, 2});
        for (size_t i = 0; i < 4; ++i) e.data[i] = 1.0f;      // channel 0
        for (size_t i = 4; i < 8; ++i) e.data[i] = 0.5f;      // channel 1
        cv::Mat y = mask_of(2, 2, {1, 1, 0, 0});
        ConfidenceMap w{fmat_of(2, 2, {0.9f, 0.8f, 0.1f, 0.1f})};
        auto sel = select_topk(e, w, y, 2);
        auto sm = similarity_map(e, sel, 2, 2, TopKAggregation::mean_embedding);
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) CHECK(sm.s.at<double>(r, c) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("weight_maps values and floor") {
    cv::Mat y = mask_of(2, 2, {1, 1, 0, 1});
    ConfidenceMap w{fmat_of(2, 2, {0.0f, 1.0f, 0.3f, 0.5f})};
    SimilarityMap s;
    s.s = (cv::Mat_<double>(2, 2) << 0.5, -0.2, 0.9, 1.0);

    SUBCASE("literal mode: eps_floor = 0") {
        auto wm = weight_maps(w, s, y, 0.0);
        CHECK(wm.omega_w.at<float>(0, 0) == doctest::Approx(1.0));        // exp(0)
        CHECK(wm.omega_s.at<float>(0, 0) == doctest::Approx(0.5));
        CHECK(wm.omega_w.at<float>(0, 1) == doctest::Approx(std::exp(1.0))); // e
        CHECK(wm.omega_w.at<float>(1, 0) == 0.0f); // Y=0
        CHECK(wm.omega_s.at<float>(1, 0) == 0.0f);
    }
    SUBCASE("background floor applied to both maps") {
        auto wm = weight_maps(w, s, y, 0.05);
        CHECK(wm.omega_w.at<float>(1, 0) == doctest::Approx(0.05));
        CHECK(wm.omega_s.at<float>(1, 0) == doctest::Approx(0.05));
        CHECK(wm.omega_w.at<float>(0, 0) == doctest::Approx(1.0)); // fg untouched
    }
    SUBCASE("omega_w lies in {eps_floor} union [1, e]") {
        Rng rng(21);
        for (int t = 0; t < 50; ++t) {
            cv::Mat yy(3, 3, CV_8UC1), ww(3, 3, CV_32F);
            cv::Mat ss(3, 3, CV_64F);
            for (int i = 0; i < 9; ++i) {
                yy.at<uint8_t>(i / 3, i % 3) = rng.next_double() < 0.5 ? 1 : 0;
                ww.at<float>(i / 3, i % 3) = static_cast<float>(rng.next_double());
                ss.at<double>(i / 3, i % 3) = rng.next_uniform(-1, 1);
            }
            auto wm = weight_maps(ConfidenceMap{ww}, SimilarityMap{ss}, yy, 0.05);
            for (int i = 0; i < 9; ++i) {
                float v = wm.omega_w.at<float>(i / 3, i % 3);
                if (yy.at<uint8_t>(i / 3, i % 3))
                    CHECK((v >= 1.0f && v <= static_cast<float>(std::exp(1.0)) + 1e-6f));
                else
                    CHECK(v == doctest::Approx(0.05));
            }
        }
    }
    SUBCASE("negative floor rejected") {
        CHECK_THROWS_AS(weight_maps(w, s, y, -0.1), ValidationError);
    }
}

TEST_CASE("mocl_loss values against scalar oracles") {
    SUBCASE("perfect prediction with uniform weights is near zero") {
        cv::Mat y = mask_of(2, 2, {1, 0, 1, 0});
        cv::Mat prob = fmat_of(2, 2, {1.0f, 0.0f, 1.0f, 0.0f});
        cv::Mat ones = fmat_of(2, 2, {1, 1, 1, 1});
        double l = mocl_loss(y, prob, wm_from(ones, ones));
        CHECK(l < 1e-3);
    }
    SUBCASE("unit weights reduce to unweighted dice + bce") {
        Rng rng(23);
        for (int t = 0; t < 100; ++t) {
            int h = 2 + static_cast<int>(rng.next_below(7));
            int w = 2 + static_cast<int>(rng.next_below(7));
            cv::Mat y(h, w, CV_8UC1), prob(h, w, CV_32F);
            for (int i = 0; i < h * w; ++i) {
                y.at<uint8_t>(i / w, i % w) = rng.next_double() < 0.5 ? 1 : 0;
                prob.at<float>(i / w, i % w) = static_cast<float>(rng.next_uniform(0.01, 0.99));
            }
            cv::Mat ones = cv::Mat::ones(h, w, CV_32F);
            double l = mocl_loss(y, prob, wm_from(ones, ones));
            CHECK(std::fabs(l - oracle_plain_dice_bce(y, prob)) < 1e-9);
        }
    }
    SUBCASE("2x2 hand case matches the pixel-by-pixel reference") {
        cv::Mat y = mask_of(2, 2, {1, 0, 0, 0});
        cv::Mat prob = fmat_of(2, 2, {0.8f, 0.2f, 0.3f, 0.1f});
        cv::Mat omega = fmat_of(2, 2, {2.0f, 0.05f, 0.05f, 0.05f});
        cv::Mat ones = cv::Mat::ones(2, 2, CV_32F);
        // split omega into omega_w * omega_s = omega * 1
        double l = mocl_loss(y, prob, wm_from(omega, ones));
        CHECK(l == doctest::Approx(oracle_weighted(y, prob, omega, ones)).epsilon(1e-12));
    }
    SUBCASE("random weighted instances match the reference") {
        Rng rng(27);
        for (int t = 0; t < 100; ++t) {
            cv::Mat y(4, 4, CV_8UC1), prob(4, 4, CV_32F), ww(4, 4, CV_32F), ws(4, 4, CV_32F);
            for (int i = 0; i < 16; ++i) {
                y.at<uint8_t>(i / 4, i % 4) = rng.next_double() < 0.5 ? 1 : 0;
                prob.at<float>(i / 4, i % 4) = static_cast<float>(rng.next_uniform(0.01, 0.99));
                ww.at<float>(i / 4, i % 4) = static_cast<float>(rng.next_uniform(0.05, 2.7));
                ws.at<float>(i / 4, i % 4) = static_cast<float>(rng.next_uniform(0.05, 1.0));
            }
            double l = mocl_loss(y, prob, wm_from(ww, ws));
            CHECK(l == doctest::Approx(oracle_weighted(y, prob, ww, ws)).epsilon(1e-9));
        }
    }
    SUBCASE("all-zero total weight raises") {
        cv::Mat y = mask_of(2, 2, {0, 0, 0, 0});
        cv::Mat prob = fmat_of(2, 2, {0.5f, 0.5f, 0.5f, 0.5f});
        cv::Mat zeros = cv::Mat::zeros(2, 2, CV_32F);
        CHECK_THROWS_AS(mocl_loss(y, prob, wm_from(zeros, zeros)), ValidationError);
    }
}

TEST_CASE("mocl_loss gradient matches central finite differences") {
    Rng rng(31);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        int h = 8, w = 8;
        cv::Mat y(h, w, CV_8UC1), ww(h, w, CV_32F), ws(h, w, CV_32F);
        cv::Mat prob(h, w, CV_64F);
        for (int i = 0; i < h * w; ++i) {
            y.at<uint8_t>(i / w, i % w) = rng.next_double() < 0.5 ? 1 : 0;
            prob.at<double>(i / w, i % w) = rng.next_uniform(0.05, 0.95);
            ww.at<float>(i / w, i % w) = static_cast<float>(rng.next_uniform(0.05, 2.7));
            ws.at<float>(i / w, i % w) = static_cast<float>(rng.next_uniform(0.05, 1.0));
        }
        WeightMaps wm = wm_from(ww, ws);
        cv::Mat g = mocl_loss_grad(y, prob, wm);
        const double hstep = 1e-5;
        for (int i = 0; i < h * w; ++i) {
            int r = i / w, c = i % w;
            double orig = prob.at<double>(r, c);
            prob.at<double>(r, c) = orig + hstep;
            double fp = mocl_loss(y, prob, wm);
            prob.at<double>(r, c) = orig - hstep;
            double fm = mocl_loss(y, prob, wm);
            prob.at<double>(r, c) = orig;
            double fd = (fp - fm) / (2.0 * hstep);
            double an = g.at<double>(r, c);
            double rel = std::fabs(an - fd) / std::max(1e-8, std::max(std::fabs(an), std::fabs(fd)));
            worst = std::max(worst, rel);
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("eps_floor=0 annihilates the background gradient") {
    Rng rng(37);
    for (int t = 0; t < 100; ++t) {
        int h = 4, w = 4;
        cv::Mat y(h, w, CV_8UC1), conf(h, w, CV_32F), prob(h, w, CV_32F);
        cv::Mat s(h, w, CV_64F);
        bool any = false;
        for (int i = 0; i < h * w; ++i) {
            uint8_t yi = rng.next_double() < 0.5 ? 1 : 0;
            y.at<uint8_t>(i / w, i % w) = yi;
            any = any || yi;
            conf.at<float>(i / w, i % w) = static_cast<float>(rng.next_double());
            prob.at<float>(i / w, i % w) = static_cast<float>(rng.next_uniform(0.05, 0.95));
            s.at<double>(i / w, i % w) = rng.next_uniform(0.1, 1.0);
        }
        if (!any) y.at<uint8_t>(0, 0) = 1;
        auto wm = weight_maps(ConfidenceMap{conf}, SimilarityMap{s}, y, 0.0);
        cv::Mat g = mocl_loss_grad(y, prob, wm);
        for (int i = 0; i < h * w; ++i)
            if (!y.at<uint8_t>(i / w, i % w)) CHECK(g.at<double>(i / w, i % w) == 0.0);
    }
}

TEST_CASE("autodiff loss agrees with the scalar implementation") {
    Rng rng(41);
    cv::Mat y(6, 6, CV_8UC1), ww(6, 6, CV_32F), ws(6, 6, CV_32F), prob(6, 6, CV_32F);
    for (int i = 0; i < 36; ++i) {
        y.at<uint8_t>(i / 6, i % 6) = rng.next_double() < 0.4 ? 1 : 0;
        prob.at<float>(i / 6, i % 6) = static_cast<float>(rng.next_uniform(0.05, 0.95));
        ww.at<float>(i / 6, i % 6) = static_cast<float>(rng.next_uniform(0.05, 2.7));
        ws.at<float>(i / 6, i % 6) = static_cast<float>(rng.next_uniform(0.05, 1.0));
    }
    WeightMaps wm = wm_from(ww, ws);
    Tensor p({6, 6});
    for (int i = 0; i < 36; ++i) p.at(i) = prob.at<float>(i / 6, i % 6);
    nn::Var pv = nn::make_var(p, true);
    nn::Var l = mocl_loss_var(pv, y, wm);
    CHECK(l->value.at(0) == doctest::Approx(mocl_loss(y, prob, wm)).epsilon(1e-5));
    nn::backward(l);
    cv::Mat g = mocl_loss_grad(y, prob, wm);
    for (int i = 0; i < 36; ++i)
        CHECK(pv->grad.at(i) == doctest::Approx(g.at<double>(i / 6, i % 6)).epsilon(1e-3).scale(0.1));
}

namespace {

// small model + four blob samples shared by the refinement tests
struct RefineFixture {
    AdapterModel model;
    std::vector<TrainSample> data;

    RefineFixture()
        : model(AdapterModel::build(
              EncoderConfig{8, 32, 2, 4, 32}, AdapterConfig{8, {}, 2.0, 8}, 1, 7)) {
        Rng rng(55);
        for (int i = 0; i < 4; ++i) {
            cv::Mat img(32, 32, CV_8UC3, cv::Scalar(210, 200, 215));
            cv::Mat gt = cv::Mat::zeros(32, 32, CV_8UC1);
            int cx = 10 + static_cast<int>(rng.next_below(12));
            int cy = 10 + static_cast<int>(rng.next_below(12));
            cv::circle(img, {cx, cy}, 6, cv::Scalar(90, 40, 70), -1);
            cv::circle(gt, {cx, cy}, 6, cv::Scalar(1), -1);
            data.push_back({img, {gt}});
        }
    }
};

} // namespace

TEST_CASE("refine contracts: zero epochs, frozen backbone, history") {
    RefineFixture fx;
    Hyperparams hp;
    hp.epochs = 0;
    MoclConfig cfg;
    cfg.k = 16;

    SUBCASE("zero epochs leaves the model untouched") {
        std::vector<std::vector<float>> before;
        for (const auto& p : fx.model.all_params) before.push_back(p->value.data);
        auto hist = refine(fx.model, fx.data, hp, cfg);
        CHECK(hist.train_loss.empty());
        for (size_t i = 0; i < before.size(); ++i)
            CHECK(fx.model.all_params[i]->value.data == before[i]);
    }
    SUBCASE("backbone hash constant through refinement; weights favor foreground") {
        hp.epochs = 2;
        hp.learning_rate = 1e-4;
        uint64_t h0 = fx.model.backbone_hash();
        auto hist = refine(fx.model, fx.data, hp, cfg);
        CHECK(fx.model.backbone_hash() == h0);
        CHECK(hist.train_loss.size() == 2);
        CHECK(hist.images_skipped == 0);
        REQUIRE(!hist.mean_omega_fg.empty());
        // foreground weight >= 1 * similarity; background floored at eps^2
        CHECK(hist.mean_omega_fg[0] > hist.mean_omega_bg[0]);
        CHECK(hist.mean_omega_bg[0] == doctest::Approx(cfg.eps_floor * cfg.eps_floor));
    }
    SUBCASE("validation-guarded refinement never keeps a worse state") {
        hp.epochs = 2;
        hp.learning_rate = 5e-2; // deliberately destructive updates
        std::vector<std::vector<float>> before;
        for (const auto& p : fx.model.all_params) before.push_back(p->value.data);
        double d0 = eval_mean_dice(fx.model, fx.data);
        auto hist = refine(fx.model, fx.data, hp, cfg, fx.data);
        CHECK(hist.val_dice.size() == 2);
        double kept = eval_mean_dice(fx.model, fx.data);
        CHECK(kept >= d0);
        if (hist.best_epoch == -1) {
            // baseline won: the model is restored bitwise
            for (size_t i = 0; i < before.size(); ++i)
                CHECK(fx.model.all_params[i]->value.data == before[i]);
        } else {
            CHECK(kept ==
                  doctest::Approx(*std::max_element(hist.val_dice.begin(), hist.val_dice.end())));
        }
        // without a validation set the destructive updates stick
        AdapterModel fresh = AdapterModel::build(EncoderConfig{8, 32, 2, 4, 32},
                                                 AdapterConfig{8, {}, 2.0, 8}, 1, 7);
        refine(fresh, fx.data, hp, cfg);
        CHECK(refine(fresh, fx.data, Hyperparams{4, 0.0, 0, 0, 1}, cfg).val_dice.empty());
    }
    SUBCASE("all images without annotations is an error") {
        hp.epochs = 1;
        std::vector<TrainSample> empty_targets = fx.data;
        for (auto& s : empty_targets)
            s.targets[0] = cv::Mat::zeros(32, 32, CV_8UC1);
        CHECK_THROWS_AS(refine(fx.model, empty_targets, hp, cfg), StageError);
    }
}

TEST_CASE("refinement on noisy labels does not hurt clean-label dice") {
    // train briefly on dilated (noisy) targets, then refine; dice against the
    // clean targets must not drop by more than 0.01
    RefineFixture fx;
    std::vector<TrainSample> noisy = fx.data;
    for (auto& s : noisy) {
        cv::Mat d;
        cv::dilate(s.targets[0], d, cv::getStructuringElement(cv::MORPH_RECT, {5, 5}));
        s.targets[0] = d;
    }
    Hyperparams hp;
    hp.epochs = 40;
    hp.patience = 40;
    hp.seed = 7;
    train_adapter(fx.model, noisy, noisy, hp);

    double before = eval_mean_dice(fx.model, fx.data);
    Hyperparams rhp;
    rhp.epochs = 2;
    rhp.learning_rate = 2e-5;
    MoclConfig cfg;
    cfg.k = 16;
    refine(fx.model, noisy, rhp, cfg);
    double after = eval_mean_dice(fx.model, fx.data);
    CHECK(after >= before - 0.01);
}
