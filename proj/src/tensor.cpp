#include "moclseg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace moclseg::nn {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

namespace {

EMap map2d(Tensor& t, int rows, int cols) { return EMap(t.data.data(), rows, cols); }
ECMap cmap2d(const Tensor& t, int rows, int cols) { return ECMap(t.data.data(), rows, cols); }

void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

} // namespace

Var make_var(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>(std::move(v));
    n->requires_grad = requires_grad;
    return n;
}

Var make_param(Tensor v, std::string name) {
    auto n = make_var(std::move(v), true);
    n->name = std::move(name);
    return n;
}

Var constant(Tensor v) { return make_var(std::move(v), false); }

namespace {

Var unary(const Var& a, Tensor out, std::function<void(Node&)> bw) {
    auto n = make_var(std::move(out), a->requires_grad);
    if (n->requires_grad) {
        n->parents = {a};
        n->backward_fn = std::move(bw);
    }
    return n;
}

Var binary(const Var& a, const Var& b, Tensor out, std::function<void(Node&)> bw) {
    auto n = make_var(std::move(out), a->requires_grad || b->requires_grad);
    if (n->requires_grad) {
        n->parents = {a, b};
        n->backward_fn = std::move(bw);
    }
    return n;
}

} // namespace

void backward(const Var& root) {
    check(root->value.numel() == 1, "backward: root must be scalar");
    // topo order via DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            if (!seen.count(n)) seen.insert(n);
            order.push_back(n);
            stack.pop_back();
        }
    }
    // order has parents before children; process in reverse (children first)
    root->ensure_grad();
    root->grad.data[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

void zero_grad(std::vector<Var>& params) {
    for (auto& p : params)
        if (!p->grad.data.empty()) p->grad.fill(0.0f);
}

Var matmul(const Var& a, const Var& b) {
    check(a->value.ndim() == 2 && b->value.ndim() == 2, "matmul: need 2D");
    int n = a->value.dim(0), k = a->value.dim(1), m = b->value.dim(1);
    check(b->value.dim(0) == k, "matmul: inner dims mismatch");
    Tensor out({n, m});
    map2d(out, n, m).noalias() = cmap2d(a->value, n, k) * cmap2d(b->value, k, m);
    return binary(a, b, std::move(out), [n, k, m](Node& self) {
        auto g = cmap2d(self.grad, n, m);
        Node* A = self.parents[0].get();
        Node* B = self.parents[1].get();
        if (A->requires_grad)
            map2d(A->ensure_grad(), n, k).noalias() += g * cmap2d(B->value, k, m).transpose();
        if (B->requires_grad)
            map2d(B->ensure_grad(), k, m).noalias() += cmap2d(A->value, n, k).transpose() * g;
    });
}

Var add(const Var& a, const Var& b) {
    check(a->value.same_shape(b->value), "add: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += b->value.at(i);
    return binary(a, b, std::move(out), [](Node& self) {
        for (int pi = 0; pi < 2; ++pi) {
            Node* p = self.parents[static_cast<size_t>(pi)].get();
            if (!p->requires_grad) continue;
            Tensor& pg = p->ensure_grad();
            for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i);
        }
    });
}

Var add_rowwise(const Var& a, const Var& bias) {
    check(a->value.ndim() == 2 && bias->value.ndim() == 1, "add_rowwise: shapes");
    int n = a->value.dim(0), m = a->value.dim(1);
    check(bias->value.dim(0) == m, "add_rowwise: bias size");
    Tensor out = a->value;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(static_cast<int64_t>(i) * m + j) += bias->value.at(j);
    return binary(a, bias, std::move(out), [n, m](Node& self) {
        Node* A = self.parents[0].get();
        Node* B = self.parents[1].get();
        if (A->requires_grad) {
            Tensor& pg = A->ensure_grad();
            for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i);
        }
        if (B->requires_grad) {
            Tensor& pg = B->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) pg.at(j) += self.grad.at(static_cast<int64_t>(i) * m + j);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) -= b->value.at(i);
    return binary(a, b, std::move(out), [](Node& self) {
        Node* A = self.parents[0].get();
        Node* B = self.parents[1].get();
        if (A->requires_grad) {
            Tensor& pg = A->ensure_grad();
            for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i);
        }
        if (B->requires_grad) {
            Tensor& pg = B->ensure_grad();
            for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) -= self.grad.at(i);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= b->value.at(i);
    return binary(a, b, std::move(out), [](Node& self) {
        Node* A = self.parents[0].get();
        Node* B = self.parents[1].get();
        if (A->requires_grad) {
            Tensor& pg = A->ensure_grad();
            for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i) * B->value.at(i);
        }
        if (B->requires_grad) {
            Tensor& pg = B->ensure_grad();
            for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i) * A->value.at(i);
        }
    });
}

Var scale(const Var& a, float s) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= s;
    return unary(a, std::move(out), [s](Node& self) {
        Node* A = self.parents[0].get();
        Tensor& pg = A->ensure_grad();
        for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i) * s;
    });
}

Var relu(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
    return unary(a, std::move(out), [](Node& self) {
        Node* A = self.parents[0].get();
        Tensor& pg = A->ensure_grad();
        for (int64_t i = 0; i < pg.numel(); ++i)
            if (A->value.at(i) > 0.0f) pg.at(i) += self.grad.at(i);
    });
}

Var gelu(const Var& a) {
    // tanh approximation
    constexpr float c = 0.7978845608f; // sqrt(2/pi)
    Tensor out = a->value;
    for (auto& v : out.data) {
        float t = std::tanh(c * (v + 0.044715f * v * v * v));
        v = 0.5f * v * (1.0f + t);
    }
    return unary(a, std::move(out), [](Node& self) {
        Node* A = self.parents[0].get();
        Tensor& pg = A->ensure_grad();
        for (int64_t i = 0; i < pg.numel(); ++i) {
            float x = A->value.at(i);
            float u = c * (x + 0.044715f * x * x * x);
            float t = std::tanh(u);
            float du = c * (1.0f + 3.0f * 0.044715f * x * x);
            float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
            pg.at(i) += self.grad.at(i) * d;
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (auto& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
    Tensor saved = out;
    return unary(a, std::move(out), [saved](Node& self) {
        Node* A = self.parents[0].get();
        Tensor& pg = A->ensure_grad();
        for (int64_t i = 0; i < pg.numel(); ++i) {
            float s = saved.at(i);
            pg.at(i) += self.grad.at(i) * s * (1.0f - s);
        }
    });
}

Var softmax_rows(const Var& a) {
    check(a->value.ndim() == 2, "softmax_rows: need 2D");
    int n = a->value.dim(0), m = a->value.dim(1);
    Tensor out = a->value;
    for (int i = 0; i < n; ++i) {
        float* row = out.data.data() + static_cast<size_t>(i) * m;
        float mx = *std::max_element(row, row + m);
        float s = 0.0f;
        for (int j = 0; j < m; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (int j = 0; j < m; ++j) row[j] /= s;
    }
    Tensor saved = out;
    return unary(a, std::move(out), [saved, n, m](Node& self) {
        Node* A = self.parents[0].get();
        Tensor& pg = A->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const float* y = saved.data.data() + static_cast<size_t>(i) * m;
            const float* g = self.grad.data.data() + static_cast<size_t>(i) * m;
            float dot = 0.0f;
            for (int j = 0; j < m; ++j) dot += y[j] * g[j];
            float* pgr = pg.data.data() + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) pgr[j] += y[j] * (g[j] - dot);
        }
    });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, float eps) {
    check(a->value.ndim() == 2, "layer_norm: need 2D");
    int n = a->value.dim(0), m = a->value.dim(1);
    check(gamma->value.numel() == m && beta->value.numel() == m, "layer_norm: affine size");
    Tensor out({n, m});
    Tensor xhat({n, m});
    std::vector<float> inv_std(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* x = a->value.data.data() + static_cast<size_t>(i) * m;
        float mu = 0.0f;
        for (int j = 0; j < m; ++j) mu += x[j];
        mu /= static_cast<float>(m);
        float var = 0.0f;
        for (int j = 0; j < m; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<float>(m);
        float is = 1.0f / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int j = 0; j < m; ++j) {
            float h = (x[j] - mu) * is;
            xhat.at(static_cast<int64_t>(i) * m + j) = h;
            out.at(static_cast<int64_t>(i) * m + j) = h * gamma->value.at(j) + beta->value.at(j);
        }
    }
    auto node = make_var(std::move(out), a->requires_grad || gamma->requires_grad || beta->requires_grad);
    if (!node->requires_grad) return node;
    node->parents = {a, gamma, beta};
    node->backward_fn = [xhat, inv_std, n, m](Node& self) {
        Node* A = self.parents[0].get();
        Node* G = self.parents[1].get();
        Node* B = self.parents[2].get();
        for (int i = 0; i < n; ++i) {
            const float* g = self.grad.data.data() + static_cast<size_t>(i) * m;
            const float* h = xhat.data.data() + static_cast<size_t>(i) * m;
            if (G->requires_grad) {
                Tensor& gg = G->ensure_grad();
                for (int j = 0; j < m; ++j) gg.at(j) += g[j] * h[j];
            }
            if (B->requires_grad) {
                Tensor& bg = B->ensure_grad();
                for (int j = 0; j < m; ++j) bg.at(j) += g[j];
            }
            if (A->requires_grad) {
                Tensor& ag = A->ensure_grad();
                // dL/dx = is/m * (m*gy - sum(gy) - h * sum(gy*h)), gy = g*gamma
                float sum_gy = 0.0f, sum_gyh = 0.0f;
                std::vector<float> gy(static_cast<size_t>(m));
                for (int j = 0; j < m; ++j) {
                    gy[static_cast<size_t>(j)] = g[j] * G->value.at(j);
                    sum_gy += gy[static_cast<size_t>(j)];
                    sum_gyh += gy[static_cast<size_t>(j)] * h[j];
                }
                float is = inv_std[static_cast<size_t>(i)];
                for (int j = 0; j < m; ++j) {
                    float v = (static_cast<float>(m) * gy[static_cast<size_t>(j)] - sum_gy -
                               h[j] * sum_gyh) *
                              is / static_cast<float>(m);
                    ag.at(static_cast<int64_t>(i) * m + j) += v;
                }
            }
        }
    };
    return node;
}

Var slice_cols(const Var& a, int c0, int c1) {
    check(a->value.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= a->value.dim(1), "slice_cols");
    int n = a->value.dim(0), m = a->value.dim(1), w = c1 - c0;
    Tensor out({n, w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
            out.at(static_cast<int64_t>(i) * w + j) = a->value.at(static_cast<int64_t>(i) * m + c0 + j);
    return unary(a, std::move(out), [n, m, w, c0](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                pg.at(static_cast<int64_t>(i) * m + c0 + j) += self.grad.at(static_cast<int64_t>(i) * w + j);
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_cols: empty");
    int n = parts[0]->value.dim(0), total = 0;
    bool rg = false;
    for (auto& p : parts) {
        check(p->value.ndim() == 2 && p->value.dim(0) == n, "concat_cols: shape");
        total += p->value.dim(1);
        rg = rg || p->requires_grad;
    }
    Tensor out({n, total});
    int off = 0;
    for (auto& p : parts) {
        int w = p->value.dim(1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                out.at(static_cast<int64_t>(i) * total + off + j) =
                    p->value.at(static_cast<int64_t>(i) * w + j);
        off += w;
    }
    auto node = make_var(std::move(out), rg);
    if (!rg) return node;
    node->parents = parts;
    node->backward_fn = [n, total](Node& self) {
        int off2 = 0;
        for (auto& p : self.parents) {
            int w = p->value.dim(1);
            if (p->requires_grad) {
                Tensor& pg = p->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        pg.at(static_cast<int64_t>(i) * w + j) +=
                            self.grad.at(static_cast<int64_t>(i) * total + off2 + j);
            }
            off2 += w;
        }
    };
    return node;
}

Var transpose2d(const Var& a) {
    check(a->value.ndim() == 2, "transpose2d");
    int n = a->value.dim(0), m = a->value.dim(1);
    Tensor out({m, n});
    cmap2d(a->value, n, m); // bounds sanity
    map2d(out, m, n) = cmap2d(a->value, n, m).transpose();
    return unary(a, std::move(out), [n, m](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        map2d(pg, n, m) += cmap2d(self.grad, m, n).transpose();
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    check(Tensor::numel_of(shape) == a->value.numel(), "reshape: numel mismatch");
    Tensor out(shape, a->value.data);
    return unary(a, std::move(out), [](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += self.grad.at(i);
    });
}

Var sum(const Var& a) {
    Tensor out({1});
    double s = 0.0;
    for (auto v : a->value.data) s += v;
    out.at(0) = static_cast<float>(s);
    return unary(a, std::move(out), [](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        float g = self.grad.at(0);
        for (int64_t i = 0; i < pg.numel(); ++i) pg.at(i) += g;
    });
}

Var mean(const Var& a) {
    auto s = sum(a);
    return scale(s, 1.0f / static_cast<float>(a->value.numel()));
}

Var upsample2x_bilinear(const Var& a) {
    check(a->value.ndim() == 3, "upsample2x: need {C,H,W}");
    int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
    int H = 2 * h, W = 2 * w;
    Tensor out({c, H, W});
    // align_corners=false convention: src = (dst + 0.5)/2 - 0.5
    auto src_of = [](int d, int n) {
        float s = (static_cast<float>(d) + 0.5f) * 0.5f - 0.5f;
        int i0 = static_cast<int>(std::floor(s));
        float f = s - static_cast<float>(i0);
        int i1 = i0 + 1;
        i0 = std::clamp(i0, 0, n - 1);
        i1 = std::clamp(i1, 0, n - 1);
        return std::tuple<int, int, float>(i0, i1, f);
    };
    for (int ch = 0; ch < c; ++ch) {
        const float* src = a->value.data.data() + static_cast<size_t>(ch) * h * w;
        float* dst = out.data.data() + static_cast<size_t>(ch) * H * W;
        for (int y = 0; y < H; ++y) {
            auto [y0, y1, fy] = src_of(y, h);
            for (int x = 0; x < W; ++x) {
                auto [x0, x1, fx] = src_of(x, w);
                float v = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                          fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                dst[y * W + x] = v;
            }
        }
    }
    return unary(a, std::move(out), [c, h, w, H, W, src_of](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
            float* gsrc = pg.data.data() + static_cast<size_t>(ch) * h * w;
            const float* gdst = self.grad.data.data() + static_cast<size_t>(ch) * H * W;
            for (int y = 0; y < H; ++y) {
                auto [y0, y1, fy] = src_of(y, h);
                for (int x = 0; x < W; ++x) {
                    auto [x0, x1, fx] = src_of(x, w);
                    float g = gdst[y * W + x];
                    gsrc[y0 * w + x0] += (1 - fy) * (1 - fx) * g;
                    gsrc[y0 * w + x1] += (1 - fy) * fx * g;
                    gsrc[y1 * w + x0] += fy * (1 - fx) * g;
                    gsrc[y1 * w + x1] += fy * fx * g;
                }
            }
        }
    });
}

Var conv2d(const Var& a, const Var& wt, const Var& b, int pad) {
    check(a->value.ndim() == 3 && wt->value.ndim() == 4, "conv2d: shapes");
    int cin = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
    int cout = wt->value.dim(0), k = wt->value.dim(2);
    check(wt->value.dim(1) == cin && wt->value.dim(3) == k, "conv2d: weight shape");
    check(b->value.numel() == cout, "conv2d: bias shape");
    // im2col: {h*w, cin*k*k} x {cin*k*k, cout}
    int64_t npix = static_cast<int64_t>(h) * w;
    int kk = cin * k * k;
    Tensor col({static_cast<int>(npix), kk});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            float* crow = col.data.data() + (static_cast<int64_t>(y) * w + x) * kk;
            int idx = 0;
            for (int ci = 0; ci < cin; ++ci) {
                const float* src = a->value.data.data() + static_cast<size_t>(ci) * h * w;
                for (int dy = 0; dy < k; ++dy) {
                    int yy = y + dy - pad;
                    for (int dx = 0; dx < k; ++dx, ++idx) {
                        int xx = x + dx - pad;
                        crow[idx] = (yy >= 0 && yy < h && xx >= 0 && xx < w) ? src[yy * w + xx] : 0.0f;
                    }
                }
            }
        }
    }
    Tensor out({cout, h, w});
    {
        // result {npix, cout} then transpose into {cout,h,w}
        EMat res = cmap2d(col, static_cast<int>(npix), kk) *
                   ECMap(wt->value.data.data(), cout, kk).transpose();
        for (int co = 0; co < cout; ++co)
            for (int64_t p = 0; p < npix; ++p)
                out.data[static_cast<size_t>(co) * npix + p] =
                    res(p, co) + b->value.at(co);
    }
    auto node = make_var(std::move(out), a->requires_grad || wt->requires_grad || b->requires_grad);
    if (!node->requires_grad) return node;
    node->parents = {a, wt, b};
    Tensor col_saved = std::move(col);
    node->backward_fn = [cin, cout, h, w, k, pad, npix, kk, col_saved](Node& self) {
        Node* A = self.parents[0].get();
        Node* Wt = self.parents[1].get();
        Node* B = self.parents[2].get();
        // grad as {npix, cout}
        EMat gout(static_cast<int>(npix), cout);
        for (int co = 0; co < cout; ++co)
            for (int64_t p = 0; p < npix; ++p)
                gout(p, co) = self.grad.data[static_cast<size_t>(co) * npix + p];
        if (B->requires_grad) {
            Tensor& bg = B->ensure_grad();
            for (int co = 0; co < cout; ++co) bg.at(co) += gout.col(co).sum();
        }
        if (Wt->requires_grad) {
            Tensor& wg = Wt->ensure_grad();
            EMap(wg.data.data(), cout, kk).noalias() +=
                gout.transpose() * cmap2d(col_saved, static_cast<int>(npix), kk);
        }
        if (A->requires_grad) {
            Tensor& ag = A->ensure_grad();
            EMat gcol = gout * ECMap(Wt->value.data.data(), cout, kk); // {npix, kk}
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const float* crow = gcol.data() + (static_cast<int64_t>(y) * w + x) * kk;
                    int idx = 0;
                    for (int ci = 0; ci < cin; ++ci) {
                        float* dst = ag.data.data() + static_cast<size_t>(ci) * h * w;
                        for (int dy = 0; dy < k; ++dy) {
                            int yy = y + dy - pad;
                            for (int dx = 0; dx < k; ++dx, ++idx) {
                                int xx = x + dx - pad;
                                if (yy >= 0 && yy < h && xx >= 0 && xx < w)
                                    dst[yy * w + xx] += crow[idx];
                            }
                        }
                    }
                }
            }
        }
    };
    return node;
}

Var concat_chan(const Var& a, const Var& b) {
    check(a->value.ndim() == 3 && b->value.ndim() == 3, "concat_chan");
    int c1 = a->value.dim(0), c2 = b->value.dim(0);
    int h = a->value.dim(1), w = a->value.dim(2);
    check(b->value.dim(1) == h && b->value.dim(2) == w, "concat_chan: spatial mismatch");
    Tensor out({c1 + c2, h, w});
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(),
              out.data.begin() + static_cast<int64_t>(c1) * h * w);
    return binary(a, b, std::move(out), [c1, c2, h, w](Node& self) {
        int64_t n1 = static_cast<int64_t>(c1) * h * w;
        int64_t n2 = static_cast<int64_t>(c2) * h * w;
        Node* A = self.parents[0].get();
        Node* B = self.parents[1].get();
        if (A->requires_grad) {
            Tensor& pg = A->ensure_grad();
            for (int64_t i = 0; i < n1; ++i) pg.at(i) += self.grad.at(i);
        }
        if (B->requires_grad) {
            Tensor& pg = B->ensure_grad();
            for (int64_t i = 0; i < n2; ++i) pg.at(i) += self.grad.at(n1 + i);
        }
    });
}

Var tokens_to_chw(const Var& a, int h, int w) {
    check(a->value.ndim() == 2 && a->value.dim(0) == h * w, "tokens_to_chw");
    int n = h * w, d = a->value.dim(1);
    Tensor out({d, h, w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.data[static_cast<size_t>(j) * n + i] = a->value.at(static_cast<int64_t>(i) * d + j);
    return unary(a, std::move(out), [n, d](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                pg.at(static_cast<int64_t>(i) * d + j) += self.grad.data[static_cast<size_t>(j) * n + i];
    });
}

Var chw_to_tokens(const Var& a) {
    check(a->value.ndim() == 3, "chw_to_tokens");
    int d = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
    int n = h * w;
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.at(static_cast<int64_t>(i) * d + j) = a->value.data[static_cast<size_t>(j) * n + i];
    return unary(a, std::move(out), [n, d](Node& self) {
        Tensor& pg = self.parents[0]->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                pg.data[static_cast<size_t>(j) * n + i] += self.grad.at(static_cast<int64_t>(i) * d + j);
    });
}

Var weighted_dice_bce_loss(const Var& prob, const Tensor& y, const Tensor& omega,
                           float eps_dice, float clamp) {
    check(prob->value.numel() == y.numel() && y.numel() == omega.numel(),
          "weighted_dice_bce_loss: size mismatch");
    int64_t n = prob->value.numel();
    // clamp is applied internally; gradients flow through the unclamped region
    std::vector<float> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        p[static_cast<size_t>(i)] = std::clamp(prob->value.at(i), clamp, 1.0f - clamp);

    double s_wpy = 0.0, s_wp = 0.0, s_wy = 0.0, s_w = 0.0, s_wbce = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double w = omega.at(i), yi = y.at(i), pi = p[static_cast<size_t>(i)];
        s_wpy += w * pi * yi;
        s_wp += w * pi;
        s_wy += w * yi;
        s_w += w;
        s_wbce += w * (-(yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi)));
    }
    double denom = s_wp + s_wy + eps_dice;
    if (s_w <= 0.0)
        throw ValidationError("weighted loss: total weight is zero (use eps_floor > 0 or skip)");
    double dice_loss = 1.0 - (2.0 * s_wpy + eps_dice) / denom;
    double bce = s_wbce / std::max(s_w, static_cast<double>(eps_dice));
    Tensor out({1});
    out.at(0) = static_cast<float>(dice_loss + bce);

    auto node = make_var(std::move(out), prob->requires_grad);
    if (!node->requires_grad) return node;
    node->parents = {prob};
    Tensor ty = y, tw = omega;
    std::vector<float> saved_p = std::move(p);
    node->backward_fn = [ty, tw, saved_p, s_wpy, denom, s_w, eps_dice, clamp](Node& self) {
        Node* P = self.parents[0].get();
        Tensor& pg = P->ensure_grad();
        float g = self.grad.at(0);
        double num = 2.0 * s_wpy + eps_dice;
        double wnorm = std::max(s_w, static_cast<double>(eps_dice));
        int64_t n2 = pg.numel();
        for (int64_t i = 0; i < n2; ++i) {
            float raw = P->value.at(i);
            if (raw < clamp || raw > 1.0f - clamp) continue; // clamped region: zero grad
            double w = tw.at(i), yi = ty.at(i), pi = saved_p[static_cast<size_t>(i)];
            // dice part: d/dp [ -(num)/(denom) ] with num,denom sums
            double ddice = -(2.0 * w * yi * denom - num * w) / (denom * denom);
            // bce part
            double dbce = w * ((1.0 - yi) / (1.0 - pi) - yi / pi) / wnorm;
            pg.at(i) += g * static_cast<float>(ddice + dbce);
        }
    };
    return node;
}

Tensor randn(std::vector<int> shape, Rng& rng, float stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.next_normal()) * stddev;
    return t;
}

Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

} // namespace moclseg::nn
