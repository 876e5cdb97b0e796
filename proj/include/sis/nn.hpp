#pragma once

// Minimal reverse-mode autodiff tensor kernel: dense double tensors, a
// define-by-run graph, 2D/3D convolution, 3D max pooling, fully-connected
// layers, ReLU, cross-entropy / Huber / BCE losses, and SGD with momentum
// and step decay.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sis/parallel.hpp"

namespace sis::nn {

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error("shape mismatch: " + what) {}
};

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(numel(shape), fill);
    }
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape)) throw ShapeMismatch("tensor data length vs shape");
    }

    static std::size_t numel(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeMismatch("non-positive dimension");
            n *= std::size_t(d);
        }
        return n;
    }
    std::size_t size() const { return data.size(); }
    int dim(int i) const { return shape[std::size_t(i)]; }
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    std::vector<double> grad; // allocated lazily, same length as value.data
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn; // propagates this->grad into parents

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
}

inline Var leaf(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return n;
}

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) { n->requires_grad = true; break; }
    if (n->requires_grad) n->backward_fn = std::move(backward);
    return n;
}

// Reverse topological sweep from a scalar root.
inline void backward(const Var& root) {
    if (root->value.size() != 1) throw ShapeMismatch("backward root must be scalar");
    std::vector<Node*> order;
    std::vector<Node*> stack{root.get()};
    std::map<Node*, int> state; // 0 unseen, 1 open, 2 done
    while (!stack.empty()) {
        Node* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (auto& p : n->parents)
                if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
        } else {
            stack.pop_back();
            if (st == 1) { st = 2; order.push_back(n); }
        }
    }
    for (Node* n : order) n->ensure_grad();
    root->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

inline void zero_grad(const Var& v) { v->grad.assign(v->value.size(), 0.0); }

// ---------------------------------------------------------------------------
// elementwise / structural ops

inline Var add(const Var& a, const Var& b) {
    if (a->value.shape != b->value.shape) throw ShapeMismatch("add");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *n.parents[std::size_t(k)];
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (double& v : out.data) v *= s;
    return make_node(std::move(out), {a}, [s](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

inline Var relu(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        const auto& x = n.parents[0]->value.data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) g[i] += n.grad[i];
    });
}

inline Var reshape(const Var& a, std::vector<int> shape) {
    if (Tensor::numel(shape) != a->value.size()) throw ShapeMismatch("reshape");
    Tensor out(std::move(shape), a->value.data);
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// Concatenate along dim 0 (channel-major), identical trailing dims.
inline Var concat0(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeMismatch("concat0: empty");
    std::vector<int> shape = xs[0]->value.shape;
    std::size_t slab = xs[0]->value.size() / std::size_t(shape[0]);
    int c_total = 0;
    for (const auto& x : xs) {
        if (x->value.shape.size() != shape.size()) throw ShapeMismatch("concat0 rank");
        for (std::size_t i = 1; i < shape.size(); ++i)
            if (x->value.shape[i] != shape[i]) throw ShapeMismatch("concat0 trailing dims");
        c_total += x->value.shape[0];
    }
    shape[0] = c_total;
    Tensor out(shape);
    std::size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + long(off));
        off += x->value.size();
    }
    return make_node(std::move(out), xs, [slab](Node& n) {
        (void)slab;
        std::size_t off = 0;
        for (auto& p : n.parents) {
            std::size_t len = p->value.size();
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
            }
            off += len;
        }
    });
}

// out[k] = a[idx[k]]
inline Var gather(const Var& a, std::vector<std::size_t> idx) {
    Tensor out({int(idx.size())});
    for (std::size_t k = 0; k < idx.size(); ++k) out.data[k] = a->value.data[idx[k]];
    return make_node(std::move(out), {a}, [idx = std::move(idx)](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k) g[idx[k]] += n.grad[k];
    });
}

// out[k] = max over bins[k] of a[flat index]; backward to first argmax.
inline Var max_over_sets(const Var& a, std::vector<std::vector<std::size_t>> bins) {
    Tensor out({int(bins.size())});
    std::vector<std::size_t> arg(bins.size());
    for (std::size_t k = 0; k < bins.size(); ++k) {
        if (bins[k].empty()) throw ShapeMismatch("max_over_sets: empty bin");
        double best = -std::numeric_limits<double>::infinity();
        std::size_t bi = bins[k][0];
        for (std::size_t i : bins[k]) {
            double v = a->value.data[i];
            if (v > best) { best = v; bi = i; }
        }
        out.data[k] = best;
        arg[k] = bi;
    }
    return make_node(std::move(out), {a}, [arg = std::move(arg)](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t k = 0; k < arg.size(); ++k) g[arg[k]] += n.grad[k];
    });
}

// Elementwise max over a stack of same-shape tensors; backward to the first
// maximizing input per element.
inline Var max_stack(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeMismatch("max_stack: empty");
    for (const auto& x : xs)
        if (x->value.shape != xs[0]->value.shape) throw ShapeMismatch("max_stack shapes");
    Tensor out = xs[0]->value;
    std::vector<int> arg(out.size(), 0);
    for (std::size_t v = 1; v < xs.size(); ++v) {
        const auto& d = xs[v]->value.data;
        for (std::size_t i = 0; i < out.size(); ++i)
            if (d[i] > out.data[i]) { out.data[i] = d[i]; arg[i] = int(v); }
    }
    return make_node(std::move(out), xs, [arg = std::move(arg)](Node& n) {
        for (std::size_t i = 0; i < arg.size(); ++i) {
            Node& p = *n.parents[std::size_t(arg[i])];
            if (p.requires_grad) p.ensure_grad()[i] += n.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// linear / convolution / pooling

// x: {in}, w: {out,in}, b: {out}
inline Var fc(const Var& x, const Var& w, const Var& b) {
    if (w->value.shape.size() != 2 || x->value.size() != std::size_t(w->value.dim(1)) ||
        b->value.size() != std::size_t(w->value.dim(0)))
        throw ShapeMismatch("fc");
    int out_n = w->value.dim(0), in_n = w->value.dim(1);
    Tensor out({out_n});
    for (int o = 0; o < out_n; ++o) {
        double acc = b->value.data[std::size_t(o)];
        const double* wr = &w->value.data[std::size_t(o) * in_n];
        for (int i = 0; i < in_n; ++i) acc += wr[i] * x->value.data[std::size_t(i)];
        out.data[std::size_t(o)] = acc;
    }
    return make_node(std::move(out), {x, w, b}, [out_n, in_n](Node& n) {
        Node& x = *n.parents[0];
        Node& w = *n.parents[1];
        Node& b = *n.parents[2];
        if (x.requires_grad) {
            auto& gx = x.ensure_grad();
            for (int o = 0; o < out_n; ++o) {
                double go = n.grad[std::size_t(o)];
                const double* wr = &w.value.data[std::size_t(o) * in_n];
                for (int i = 0; i < in_n; ++i) gx[std::size_t(i)] += go * wr[i];
            }
        }
        if (w.requires_grad) {
            auto& gw = w.ensure_grad();
            for (int o = 0; o < out_n; ++o) {
                double go = n.grad[std::size_t(o)];
                double* gr = &gw[std::size_t(o) * in_n];
                for (int i = 0; i < in_n; ++i) gr[i] += go * x.value.data[std::size_t(i)];
            }
        }
        if (b.requires_grad) {
            auto& gb = b.ensure_grad();
            for (int o = 0; o < out_n; ++o) gb[std::size_t(o)] += n.grad[std::size_t(o)];
        }
    });
}

namespace detail {
inline int conv_out_dim(int in, int k, int s, int p, const char* what) {
    int num = in + 2 * p - k;
    if (num < 0 || num % s != 0) throw ShapeMismatch(what);
    return num / s + 1;
}
} // namespace detail

// x: {Ci,X,Y,Z}, w: {Co,Ci,kx,ky,kz}, b: {Co}
inline Var conv3d(const Var& x, const Var& w, const Var& b,
                  std::array<int, 3> stride, std::array<int, 3> pad) {
    if (x->value.shape.size() != 4 || w->value.shape.size() != 5 ||
        x->value.dim(0) != w->value.dim(1) || b->value.size() != std::size_t(w->value.dim(0)))
        throw ShapeMismatch("conv3d arguments");
    const int ci = x->value.dim(0), X = x->value.dim(1), Y = x->value.dim(2), Z = x->value.dim(3);
    const int co = w->value.dim(0), kx = w->value.dim(2), ky = w->value.dim(3), kz = w->value.dim(4);
    const int Xo = detail::conv_out_dim(X, kx, stride[0], pad[0], "conv3d x dim");
    const int Yo = detail::conv_out_dim(Y, ky, stride[1], pad[1], "conv3d y dim");
    const int Zo = detail::conv_out_dim(Z, kz, stride[2], pad[2], "conv3d z dim");
    Tensor out({co, Xo, Yo, Zo});
    const std::size_t in_slab = std::size_t(X) * Y * Z;
    const std::size_t out_slab = std::size_t(Xo) * Yo * Zo;
    const std::size_t ker = std::size_t(kx) * ky * kz;

    const double* xd = x->value.data.data();
    const double* wd = w->value.data.data();
    const double* bd = b->value.data.data();
    double* od = out.data.data();
    parallel_for(std::size_t(co), [&](std::size_t oc) {
        const double* woc = wd + oc * std::size_t(ci) * ker;
        double* ooc = od + oc * out_slab;
        for (int ox = 0; ox < Xo; ++ox)
            for (int oy = 0; oy < Yo; ++oy)
                for (int oz = 0; oz < Zo; ++oz) {
                    double acc = bd[oc];
                    for (int c = 0; c < ci; ++c) {
                        const double* xc = xd + std::size_t(c) * in_slab;
                        const double* wc = woc + std::size_t(c) * ker;
                        for (int a = 0; a < kx; ++a) {
                            int ix = ox * stride[0] - pad[0] + a;
                            if (ix < 0 || ix >= X) continue;
                            for (int e = 0; e < ky; ++e) {
                                int iy = oy * stride[1] - pad[1] + e;
                                if (iy < 0 || iy >= Y) continue;
                                const double* xrow = xc + (std::size_t(ix) * Y + iy) * Z;
                                const double* wrow = wc + (std::size_t(a) * ky + e) * kz;
                                for (int f = 0; f < kz; ++f) {
                                    int iz = oz * stride[2] - pad[2] + f;
                                    if (iz < 0 || iz >= Z) continue;
                                    acc += wrow[f] * xrow[iz];
                                }
                            }
                        }
                    }
                    ooc[(std::size_t(ox) * Yo + oy) * Zo + oz] = acc;
                }
    });

    auto bw = [=](Node& n) {
        Node& xn = *n.parents[0];
        Node& wn = *n.parents[1];
        Node& bn = *n.parents[2];
        const double* gout = n.grad.data();
        if (bn.requires_grad) {
            auto& gb = bn.ensure_grad();
            for (int oc = 0; oc < co; ++oc) {
                double acc = 0.0;
                const double* g = gout + std::size_t(oc) * out_slab;
                for (std::size_t i = 0; i < out_slab; ++i) acc += g[i];
                gb[std::size_t(oc)] += acc;
            }
        }
        if (wn.requires_grad) {
            auto& gw = wn.ensure_grad();
            const double* xd = xn.value.data.data();
            parallel_for(std::size_t(co), [&](std::size_t oc) {
                const double* g = gout + oc * out_slab;
                double* gwoc = gw.data() + oc * std::size_t(ci) * ker;
                for (int ox = 0; ox < Xo; ++ox)
                    for (int oy = 0; oy < Yo; ++oy)
                        for (int oz = 0; oz < Zo; ++oz) {
                            double go = g[(std::size_t(ox) * Yo + oy) * Zo + oz];
                            if (go == 0.0) continue;
                            for (int c = 0; c < ci; ++c) {
                                const double* xc = xd + std::size_t(c) * in_slab;
                                double* gwc = gwoc + std::size_t(c) * ker;
                                for (int a = 0; a < kx; ++a) {
                                    int ix = ox * stride[0] - pad[0] + a;
                                    if (ix < 0 || ix >= X) continue;
                                    for (int e = 0; e < ky; ++e) {
                                        int iy = oy * stride[1] - pad[1] + e;
                                        if (iy < 0 || iy >= Y) continue;
                                        const double* xrow = xc + (std::size_t(ix) * Y + iy) * Z;
                                        double* gwrow = gwc + (std::size_t(a) * ky + e) * kz;
                                        for (int f = 0; f < kz; ++f) {
                                            int iz = oz * stride[2] - pad[2] + f;
                                            if (iz < 0 || iz >= Z) continue;
                                            gwrow[f] += go * xrow[iz];
                                        }
                                    }
                                }
                            }
                        }
            });
        }
        if (xn.requires_grad) {
            auto& gx = xn.ensure_grad();
            const double* wd = wn.value.data.data();
            parallel_for(std::size_t(ci), [&](std::size_t c) {
                double* gxc = gx.data() + c * in_slab;
                for (int oc = 0; oc < co; ++oc) {
                    const double* g = gout + std::size_t(oc) * out_slab;
                    const double* wc = wd + (std::size_t(oc) * ci + c) * ker;
                    for (int ox = 0; ox < Xo; ++ox)
                        for (int oy = 0; oy < Yo; ++oy)
                            for (int oz = 0; oz < Zo; ++oz) {
                                double go = g[(std::size_t(ox) * Yo + oy) * Zo + oz];
                                if (go == 0.0) continue;
                                for (int a = 0; a < kx; ++a) {
                                    int ix = ox * stride[0] - pad[0] + a;
                                    if (ix < 0 || ix >= X) continue;
                                    for (int e = 0; e < ky; ++e) {
                                        int iy = oy * stride[1] - pad[1] + e;
                                        if (iy < 0 || iy >= Y) continue;
                                        double* gxrow = gxc + (std::size_t(ix) * Y + iy) * Z;
                                        const double* wrow = wc + (std::size_t(a) * ky + e) * kz;
                                        for (int f = 0; f < kz; ++f) {
                                            int iz = oz * stride[2] - pad[2] + f;
                                            if (iz < 0 || iz >= Z) continue;
                                            gxrow[iz] += go * wrow[f];
                                        }
                                    }
                                }
                            }
                }
            });
        }
    };
    return make_node(std::move(out), {x, w, b}, std::move(bw));
}

// x: {Ci,H,W}, w: {Co,Ci,kh,kw}, b: {Co}
inline Var conv2d(const Var& x, const Var& w, const Var& b,
                  std::array<int, 2> stride, std::array<int, 2> pad) {
    if (x->value.shape.size() != 3 || w->value.shape.size() != 4 ||
        x->value.dim(0) != w->value.dim(1) || b->value.size() != std::size_t(w->value.dim(0)))
        throw ShapeMismatch("conv2d arguments");
    // expressed as a conv3d with a unit z axis
    auto x4 = reshape(x, {x->value.dim(0), x->value.dim(1), x->value.dim(2), 1});
    auto w5 = reshape(w, {w->value.dim(0), w->value.dim(1), w->value.dim(2), w->value.dim(3), 1});
    auto y = conv3d(x4, w5, b, {stride[0], stride[1], 1}, {pad[0], pad[1], 0});
    return reshape(y, {y->value.dim(0), y->value.dim(1), y->value.dim(2)});
}

// x: {C,X,Y,Z}; padded cells are ignored (never the max). Ties -> first index.
inline Var maxpool3d(const Var& x, std::array<int, 3> kernel, std::array<int, 3> stride,
                     std::array<int, 3> pad) {
    if (x->value.shape.size() != 4) throw ShapeMismatch("maxpool3d input rank");
    const int C = x->value.dim(0), X = x->value.dim(1), Y = x->value.dim(2), Z = x->value.dim(3);
    const int Xo = detail::conv_out_dim(X, kernel[0], stride[0], pad[0], "maxpool3d x dim");
    const int Yo = detail::conv_out_dim(Y, kernel[1], stride[1], pad[1], "maxpool3d y dim");
    const int Zo = detail::conv_out_dim(Z, kernel[2], stride[2], pad[2], "maxpool3d z dim");
    Tensor out({C, Xo, Yo, Zo});
    std::vector<std::size_t> arg(out.size());
    const std::size_t in_slab = std::size_t(X) * Y * Z;
    for (int c = 0; c < C; ++c) {
        const double* xc = x->value.data.data() + std::size_t(c) * in_slab;
        for (int ox = 0; ox < Xo; ++ox)
            for (int oy = 0; oy < Yo; ++oy)
                for (int oz = 0; oz < Zo; ++oz) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t bi = 0;
                    bool found = false;
                    for (int a = 0; a < kernel[0]; ++a) {
                        int ix = ox * stride[0] - pad[0] + a;
                        if (ix < 0 || ix >= X) continue;
                        for (int e = 0; e < kernel[1]; ++e) {
                            int iy = oy * stride[1] - pad[1] + e;
                            if (iy < 0 || iy >= Y) continue;
                            for (int f = 0; f < kernel[2]; ++f) {
                                int iz = oz * stride[2] - pad[2] + f;
                                if (iz < 0 || iz >= Z) continue;
                                std::size_t ii = (std::size_t(ix) * Y + iy) * Z + iz;
                                if (!found || xc[ii] > best) { best = xc[ii]; bi = ii; found = true; }
                            }
                        }
                    }
                    if (!found) throw ShapeMismatch("maxpool3d window fully padded");
                    std::size_t oi = ((std::size_t(c) * Xo + ox) * Yo + oy) * Zo + oz;
                    out.data[oi] = best;
                    arg[oi] = std::size_t(c) * in_slab + bi;
                }
    }
    return make_node(std::move(out), {x}, [arg = std::move(arg)](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// losses (all scalar, mean-reduced)

// logits: {M,C} (or {C} for a single row); one target class per row.
// Optional per-row weights (default 1/M each after normalization).
inline Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                         const std::vector<double>& row_weights = {}) {
    std::vector<int> shape = logits->value.shape;
    int M, C;
    if (shape.size() == 1) { M = 1; C = shape[0]; }
    else if (shape.size() == 2) { M = shape[0]; C = shape[1]; }
    else throw ShapeMismatch("cross_entropy logits rank");
    if (int(targets.size()) != M) throw ShapeMismatch("cross_entropy targets");
    std::vector<double> w(std::size_t(M), 1.0 / M);
    if (!row_weights.empty()) {
        if (int(row_weights.size()) != M) throw ShapeMismatch("cross_entropy weights");
        w = row_weights;
    }
    Tensor out({1});
    std::vector<double> grad_cache(std::size_t(M) * C); // softmax probs
    double loss = 0.0;
    for (int m = 0; m < M; ++m) {
        const double* row = &logits->value.data[std::size_t(m) * C];
        double mx = *std::max_element(row, row + C);
        double lse = 0.0;
        for (int c = 0; c < C; ++c) lse += std::exp(row[c] - mx);
        lse = mx + std::log(lse);
        for (int c = 0; c < C; ++c) grad_cache[std::size_t(m) * C + c] = std::exp(row[c] - lse);
        loss += w[std::size_t(m)] * (lse - row[targets[std::size_t(m)]]);
    }
    out.data[0] = loss;
    return make_node(std::move(out), {logits},
                     [M, C, targets, w, probs = std::move(grad_cache)](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        double go = n.grad[0];
        for (int m = 0; m < M; ++m)
            for (int c = 0; c < C; ++c) {
                double p = probs[std::size_t(m) * C + c];
                double t = (c == targets[std::size_t(m)]) ? 1.0 : 0.0;
                g[std::size_t(m) * C + c] += go * w[std::size_t(m)] * (p - t);
            }
    });
}

// mean Huber (smooth-L1) loss of pred against a fixed target
inline Var huber(const Var& pred, const std::vector<double>& target, double delta = 1.0) {
    if (pred->value.size() != target.size()) throw ShapeMismatch("huber");
    if (delta <= 0.0) throw ShapeMismatch("huber delta");
    std::size_t n_el = pred->value.size();
    Tensor out({1});
    // per element: 0.5 x^2 for |x| <= delta, delta(|x| - 0.5 delta) otherwise
    double loss = 0.0;
    for (std::size_t i = 0; i < n_el; ++i) {
        double r = pred->value.data[i] - target[i];
        double a = std::fabs(r);
        loss += a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
    }
    out.data[0] = loss / double(n_el);
    return make_node(std::move(out), {pred}, [target, delta, n_el](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        double go = n.grad[0] / double(n_el);
        for (std::size_t i = 0; i < n_el; ++i) {
            double r = n.parents[0]->value.data[i] - target[i];
            double d = std::fabs(r) <= delta ? r : (r > 0 ? delta : -delta);
            g[i] += go * d;
        }
    });
}

// mean binary cross entropy on logits against targets in [0,1]
inline Var bce_logits(const Var& logits, const std::vector<double>& targets) {
    if (logits->value.size() != targets.size()) throw ShapeMismatch("bce");
    std::size_t n_el = logits->value.size();
    Tensor out({1});
    double loss = 0.0;
    for (std::size_t i = 0; i < n_el; ++i) {
        double z = logits->value.data[i], t = targets[i];
        // log(1+e^z) computed stably
        double sp = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        loss += sp - t * z;
    }
    out.data[0] = loss / double(n_el);
    return make_node(std::move(out), {logits}, [targets, n_el](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        double go = n.grad[0] / double(n_el);
        for (std::size_t i = 0; i < n_el; ++i) {
            double z = n.parents[0]->value.data[i];
            double sig = 1.0 / (1.0 + std::exp(-z));
            g[i] += go * (sig - targets[i]);
        }
    });
}

inline Var sum(const Var& a) {
    Tensor out({1});
    out.data[0] = std::accumulate(a->value.data.begin(), a->value.data.end(), 0.0);
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (double& v : g) v += n.grad[0];
    });
}

// ---------------------------------------------------------------------------
// parameters, init, SGD

struct TrainConfig {
    double learning_rate = 0.001;
    double momentum = 0.9;
    long lr_decay_every = 100000;
    double lr_decay_factor = 0.1;
    double clip_norm = 10.0; // global gradient-norm clip; <= 0 disables

    double lr_at(long step) const {
        long k = lr_decay_every > 0 ? step / lr_decay_every : 0;
        return learning_rate * std::pow(lr_decay_factor, double(k));
    }
};

class ParamStore {
public:
    Var create(const std::string& name, Tensor init) {
        if (params_.count(name) != 0)
            throw std::invalid_argument("duplicate parameter name: " + name);
        Var v = leaf(std::move(init));
        names_.push_back(name);
        params_[name] = v;
        velocity_[name].assign(v->value.size(), 0.0);
        return v;
    }
    Var get(const std::string& name) const { return params_.at(name); }
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const std::vector<std::string>& names() const { return names_; }

    void zero_grads() {
        for (auto& [k, v] : params_) v->grad.assign(v->value.size(), 0.0);
    }

    // v <- momentum*v + grad; p <- p - lr(step)*v
    void sgd_step(const TrainConfig& cfg, long step) {
        double lr = cfg.lr_at(step);
        double gscale = 1.0;
        if (cfg.clip_norm > 0.0) {
            double sq = 0.0;
            for (auto& name : names_) {
                Var p = params_[name];
                if (p->grad.size() != p->value.size()) continue;
                for (double g : p->grad) sq += g * g;
            }
            double norm = std::sqrt(sq);
            if (norm > cfg.clip_norm) gscale = cfg.clip_norm / norm;
        }
        for (auto& name : names_) {
            Var p = params_[name];
            if (p->grad.size() != p->value.size()) continue; // no grad this step
            auto& vel = velocity_[name];
            for (std::size_t i = 0; i < vel.size(); ++i) {
                vel[i] = cfg.momentum * vel[i] + gscale * p->grad[i];
                p->value.data[i] -= lr * vel[i];
            }
        }
    }
    std::map<std::string, std::vector<double>>& velocity() { return velocity_; }

private:
    std::vector<std::string> names_; // insertion order, for deterministic stepping
    std::map<std::string, Var> params_;
    std::map<std::string, std::vector<double>> velocity_;
};

// He-style fan-in uniform init
inline Tensor he_uniform(std::vector<int> shape, std::size_t fan_in, std::mt19937_64& rng) {
    double bound = std::sqrt(6.0 / double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return t;
}

// ---------------------------------------------------------------------------
// gradient checking

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

// fn rebuilds the graph from the current parameter values and returns a
// scalar Var. Compares reverse-mode grads against central differences.
inline GradCheckReport grad_check(const std::function<Var()>& fn, const std::vector<Var>& params,
                                  double h = 1e-5) {
    GradCheckReport rep;
    Var loss = fn();
    for (const auto& p : params) zero_grad(p);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Var p = params[pi];
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double orig = p->value.data[i];
            p->value.data[i] = orig + h;
            double fp = fn()->value.data[0];
            p->value.data[i] = orig - h;
            double fm = fn()->value.data[0];
            p->value.data[i] = orig;
            double num = (fp - fm) / (2 * h);
            double ana = analytic[pi][i];
            double denom = std::max({std::fabs(num), std::fabs(ana), 1.0});
            rep.max_rel_error = std::max(rep.max_rel_error, std::fabs(num - ana) / denom);
            ++rep.checked;
        }
    }
    return rep;
}

} // namespace sis::nn
