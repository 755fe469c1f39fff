#ifndef DIFFUERASER_AUTODIFF_HPP
#define DIFFUERASER_AUTODIFF_HPP

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace diffueraser {

// A named, trainable array. The tape accumulates gradients into `grad`.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad() {
        if (!grad.same_shape(value)) grad = Tensor(value.shape);
        grad.fill(0.0);
    }
};

struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Forward ops append nodes; backward() walks the node list
// in reverse and runs each pullback. One tape per forward pass; values live in
// doubles so finite-difference checks have headroom.
struct Tape {
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> pull;
    };

    std::vector<Node> nodes;
    std::vector<std::pair<int, Param*>> param_nodes;

    const Tensor& val(Value v) const { return nodes[static_cast<size_t>(v.id)].val; }

    // gradient buffer, allocated on first touch
    Tensor& grad_of(int id) {
        Node& n = nodes[static_cast<size_t>(id)];
        if (!n.grad.same_shape(n.val)) n.grad = Tensor(n.val.shape);
        return n.grad;
    }

    bool needs(Value v) const {
        return v.valid() && nodes[static_cast<size_t>(v.id)].requires_grad;
    }

    Value push(Tensor v, bool requires_grad) {
        Node n;
        n.val = std::move(v);
        n.requires_grad = requires_grad;
        nodes.push_back(std::move(n));
        return Value{static_cast<int>(nodes.size()) - 1};
    }

    void set_pull(Value v, std::function<void(Tape&)> fn) {
        nodes[static_cast<size_t>(v.id)].pull = std::move(fn);
    }

    Value constant(Tensor v) { return push(std::move(v), false); }
    Value leaf(Tensor v) { return push(std::move(v), true); }

    Value param(Param& p) {
        Value v = push(p.value, true);
        param_nodes.emplace_back(v.id, &p);
        return v;
    }

    // Seeds d(loss)=1, runs pullbacks in reverse, flushes grads into Params.
    void backward(Value loss) {
        if (val(loss).numel() != 1) throw std::logic_error("backward: loss must be scalar");
        grad_of(loss.id)[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[static_cast<size_t>(i)];
            if (n.requires_grad && n.pull && n.grad.same_shape(n.val)) n.pull(*this);
        }
        for (auto& [id, p] : param_nodes) {
            Node& n = nodes[static_cast<size_t>(id)];
            if (!n.grad.same_shape(n.val)) continue;  // param unused by this loss
            if (!p->grad.same_shape(p->value)) p->zero_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) p->grad[i] += n.grad[i];
        }
    }
};

namespace ops {

inline Value add(Tape& t, Value a, Value b) {
    check_same_shape(t.val(a), t.val(b), "ops::add");
    Value o = t.push(diffueraser::add(t.val(a), t.val(b)), t.needs(a) || t.needs(b));
    if (t.needs(o)) {
        int oid = o.id, ia = a.id, ib = b.id;
        bool na = t.needs(a), nb = t.needs(b);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            if (na) {
                Tensor& ga = tp.grad_of(ia);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (nb) {
                Tensor& gb = tp.grad_of(ib);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            }
        });
    }
    return o;
}

inline Value scale(Tape& t, Value a, double s) {
    Value o = t.push(diffueraser::scale(t.val(a), s), t.needs(a));
    if (t.needs(o)) {
        int oid = o.id, ia = a.id;
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            Tensor& ga = tp.grad_of(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
        });
    }
    return o;
}

// x + c with c a plain tensor (positional encodings, assembled conditions)
inline Value add_const(Tape& t, Value a, const Tensor& c) {
    check_same_shape(t.val(a), c, "ops::add_const");
    Value o = t.push(diffueraser::add(t.val(a), c), t.needs(a));
    if (t.needs(o)) {
        int oid = o.id, ia = a.id;
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            Tensor& ga = tp.grad_of(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        });
    }
    return o;
}

inline Value silu(Tape& t, Value a) {
    const Tensor& x = t.val(a);
    Tensor y = x;
    for (int64_t i = 0; i < y.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x[i]));
        y[i] = x[i] * s;
    }
    Value o = t.push(std::move(y), t.needs(a));
    if (t.needs(o)) {
        int oid = o.id, ia = a.id;
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& x2 = tp.nodes[static_cast<size_t>(ia)].val;
            Tensor& ga = tp.grad_of(ia);
            for (int64_t i = 0; i < g.numel(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-x2[i]));
                ga[i] += g[i] * s * (1.0 + x2[i] * (1.0 - s));
            }
        });
    }
    return o;
}

// x [n,cin,h,w] * w [cout,cin,k,k] + b [cout], square kernel
inline Value conv2d(Tape& t, Value x, Value w, Value b, int stride, int pad) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank");
    if (xv.dim(1) != wv.dim(1))
        throw std::invalid_argument("conv2d: channel mismatch " + xv.shape_str() + " vs " +
                                    wv.shape_str());
    int64_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    int64_t cout = wv.dim(0), k = wv.dim(2);
    int64_t ho = (h + 2 * pad - k) / stride + 1;
    int64_t wo = (wd + 2 * pad - k) / stride + 1;
    Tensor y({n, cout, ho, wo});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t co = 0; co < cout; ++co) {
            double bias = bv[co];
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    double acc = bias;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const double* xp = xv.ptr() + ((in * cin + ci) * h) * wd;
                        const double* wp = wv.ptr() + ((co * cin + ci) * k) * k;
                        for (int64_t ky = 0; ky < k; ++ky) {
                            int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < k; ++kx) {
                                int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= wd) continue;
                                acc += xp[iy * wd + ix] * wp[ky * k + kx];
                            }
                        }
                    }
                    y[((in * cout + co) * ho + oy) * wo + ox] = acc;
                }
        }
    bool rg = t.needs(x) || t.needs(w) || t.needs(b);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ix_ = x.id, iw = w.id, ib = b.id;
        bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(b);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& xv2 = tp.nodes[static_cast<size_t>(ix_)].val;
            const Tensor& wv2 = tp.nodes[static_cast<size_t>(iw)].val;
            int64_t n2 = xv2.dim(0), ci2 = xv2.dim(1), h2 = xv2.dim(2), w2 = xv2.dim(3);
            int64_t co2 = wv2.dim(0), k2 = wv2.dim(2);
            int64_t ho2 = g.dim(2), wo2 = g.dim(3);
            if (nb) {
                Tensor& gb = tp.grad_of(ib);
                for (int64_t in = 0; in < n2; ++in)
                    for (int64_t co = 0; co < co2; ++co) {
                        double s = 0.0;
                        const double* gp = g.ptr() + ((in * co2 + co) * ho2) * wo2;
                        for (int64_t i = 0; i < ho2 * wo2; ++i) s += gp[i];
                        gb[co] += s;
                    }
            }
            if (nw) {
                Tensor& gw = tp.grad_of(iw);
                for (int64_t in = 0; in < n2; ++in)
                    for (int64_t co = 0; co < co2; ++co)
                        for (int64_t ci = 0; ci < ci2; ++ci) {
                            const double* xp = xv2.ptr() + ((in * ci2 + ci) * h2) * w2;
                            const double* gp = g.ptr() + ((in * co2 + co) * ho2) * wo2;
                            for (int64_t ky = 0; ky < k2; ++ky)
                                for (int64_t kx = 0; kx < k2; ++kx) {
                                    double acc = 0.0;
                                    for (int64_t oy = 0; oy < ho2; ++oy) {
                                        int64_t iy = oy * stride - pad + ky;
                                        if (iy < 0 || iy >= h2) continue;
                                        for (int64_t ox = 0; ox < wo2; ++ox) {
                                            int64_t ixp = ox * stride - pad + kx;
                                            if (ixp < 0 || ixp >= w2) continue;
                                            acc += gp[oy * wo2 + ox] * xp[iy * w2 + ixp];
                                        }
                                    }
                                    gw[((co * ci2 + ci) * k2 + ky) * k2 + kx] += acc;
                                }
                        }
            }
            if (nx) {
                Tensor& gx = tp.grad_of(ix_);
                for (int64_t in = 0; in < n2; ++in)
                    for (int64_t co = 0; co < co2; ++co) {
                        const double* gp = g.ptr() + ((in * co2 + co) * ho2) * wo2;
                        for (int64_t ci = 0; ci < ci2; ++ci) {
                            double* gxp = gx.ptr() + ((in * ci2 + ci) * h2) * w2;
                            const double* wp = wv2.ptr() + ((co * ci2 + ci) * k2) * k2;
                            for (int64_t oy = 0; oy < ho2; ++oy)
                                for (int64_t ox = 0; ox < wo2; ++ox) {
                                    double gv = gp[oy * wo2 + ox];
                                    if (gv == 0.0) continue;
                                    for (int64_t ky = 0; ky < k2; ++ky) {
                                        int64_t iy = oy * stride - pad + ky;
                                        if (iy < 0 || iy >= h2) continue;
                                        for (int64_t kx = 0; kx < k2; ++kx) {
                                            int64_t ixp = ox * stride - pad + kx;
                                            if (ixp < 0 || ixp >= w2) continue;
                                            gxp[iy * w2 + ixp] += gv * wp[ky * k2 + kx];
                                        }
                                    }
                                }
                        }
                    }
            }
        });
    }
    return o;
}

// GroupNorm over [n,c,h,w]; groups divide c; affine per channel
inline Value group_norm(Tape& t, Value x, Value gamma, Value beta, int groups,
                        double eps = 1e-5) {
    const Tensor& xv = t.val(x);
    int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
    int64_t cpg = c / groups;
    int64_t m = cpg * h * w;
    const Tensor& gv = t.val(gamma);
    const Tensor& bv = t.val(beta);
    Tensor y(xv.shape);
    Tensor mean({n, static_cast<int64_t>(groups)});
    Tensor inv({n, static_cast<int64_t>(groups)});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t gp = 0; gp < groups; ++gp) {
            double mu = 0.0;
            const double* base = xv.ptr() + ((in * c + gp * cpg) * h) * w;
            for (int64_t i = 0; i < m; ++i) mu += base[i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                double d = base[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            double iv = 1.0 / std::sqrt(var + eps);
            mean[in * groups + gp] = mu;
            inv[in * groups + gp] = iv;
            double* yp = y.ptr() + ((in * c + gp * cpg) * h) * w;
            for (int64_t cc = 0; cc < cpg; ++cc) {
                double ga = gv[gp * cpg + cc], be = bv[gp * cpg + cc];
                for (int64_t i = 0; i < h * w; ++i) {
                    int64_t idx = cc * h * w + i;
                    yp[idx] = (base[idx] - mu) * iv * ga + be;
                }
            }
        }
    bool rg = t.needs(x) || t.needs(gamma) || t.needs(beta);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ix = x.id, ig = gamma.id, ib = beta.id;
        bool nx = t.needs(x), ng = t.needs(gamma), nb = t.needs(beta);
        t.set_pull(o, [=, mean = std::move(mean), inv = std::move(inv)](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& xv2 = tp.nodes[static_cast<size_t>(ix)].val;
            const Tensor& gv2 = tp.nodes[static_cast<size_t>(ig)].val;
            int64_t n2 = xv2.dim(0), c2 = xv2.dim(1), h2 = xv2.dim(2), w2 = xv2.dim(3);
            int64_t cpg2 = c2 / groups, m2 = cpg2 * h2 * w2;
            for (int64_t in = 0; in < n2; ++in)
                for (int64_t gp = 0; gp < groups; ++gp) {
                    double mu = mean[in * groups + gp];
                    double iv = inv[in * groups + gp];
                    const double* xb = xv2.ptr() + ((in * c2 + gp * cpg2) * h2) * w2;
                    const double* gb = g.ptr() + ((in * c2 + gp * cpg2) * h2) * w2;
                    // per-channel reductions
                    for (int64_t cc = 0; cc < cpg2; ++cc) {
                        int64_t ch = gp * cpg2 + cc;
                        double sg = 0.0, sgx = 0.0;
                        for (int64_t i = 0; i < h2 * w2; ++i) {
                            int64_t idx = cc * h2 * w2 + i;
                            double xh = (xb[idx] - mu) * iv;
                            sg += gb[idx];
                            sgx += gb[idx] * xh;
                        }
                        if (nb) tp.grad_of(ib)[ch] += sg;
                        if (ng) tp.grad_of(ig)[ch] += sgx;
                    }
                    if (nx) {
                        // dL/dx = iv * (ghat - mean(ghat) - xhat*mean(ghat*xhat)),
                        // ghat = dy*gamma, means over the group
                        double mg = 0.0, mgx = 0.0;
                        for (int64_t cc = 0; cc < cpg2; ++cc) {
                            double ga = gv2[gp * cpg2 + cc];
                            for (int64_t i = 0; i < h2 * w2; ++i) {
                                int64_t idx = cc * h2 * w2 + i;
                                double gh = gb[idx] * ga;
                                double xh = (xb[idx] - mu) * iv;
                                mg += gh;
                                mgx += gh * xh;
                            }
                        }
                        mg /= static_cast<double>(m2);
                        mgx /= static_cast<double>(m2);
                        double* gxp = tp.grad_of(ix).ptr() + ((in * c2 + gp * cpg2) * h2) * w2;
                        for (int64_t cc = 0; cc < cpg2; ++cc) {
                            double ga = gv2[gp * cpg2 + cc];
                            for (int64_t i = 0; i < h2 * w2; ++i) {
                                int64_t idx = cc * h2 * w2 + i;
                                double gh = gb[idx] * ga;
                                double xh = (xb[idx] - mu) * iv;
                                gxp[idx] += iv * (gh - mg - xh * mgx);
                            }
                        }
                    }
                }
        });
    }
    return o;
}

// rows of x (all but last axis flattened) times w^T: y = x @ w^T + b
// x [..., cin], w [cout, cin], b [cout]
inline Value linear(Tape& t, Value x, Value w, Value b) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    int64_t cin = xv.shape.back();
    if (wv.dim(1) != cin) throw std::invalid_argument("linear: dim mismatch");
    int64_t cout = wv.dim(0);
    int64_t rows = xv.numel() / cin;
    std::vector<int64_t> oshape = xv.shape;
    oshape.back() = cout;
    Tensor y(oshape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = xv.ptr() + r * cin;
        double* yp = y.ptr() + r * cout;
        for (int64_t co = 0; co < cout; ++co) {
            const double* wp = wv.ptr() + co * cin;
            double acc = bv[co];
            for (int64_t ci = 0; ci < cin; ++ci) acc += xp[ci] * wp[ci];
            yp[co] = acc;
        }
    }
    bool rg = t.needs(x) || t.needs(w) || t.needs(b);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ix = x.id, iw = w.id, ib = b.id;
        bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(b);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& xv2 = tp.nodes[static_cast<size_t>(ix)].val;
            const Tensor& wv2 = tp.nodes[static_cast<size_t>(iw)].val;
            int64_t cin2 = xv2.shape.back(), cout2 = wv2.dim(0);
            int64_t rows2 = xv2.numel() / cin2;
            for (int64_t r = 0; r < rows2; ++r) {
                const double* gp = g.ptr() + r * cout2;
                const double* xp = xv2.ptr() + r * cin2;
                if (nx) {
                    double* gxp = tp.grad_of(ix).ptr() + r * cin2;
                    for (int64_t co = 0; co < cout2; ++co) {
                        double gv = gp[co];
                        if (gv == 0.0) continue;
                        const double* wp = wv2.ptr() + co * cin2;
                        for (int64_t ci = 0; ci < cin2; ++ci) gxp[ci] += gv * wp[ci];
                    }
                }
                if (nw) {
                    Tensor& gw = tp.grad_of(iw);
                    for (int64_t co = 0; co < cout2; ++co) {
                        double gv = gp[co];
                        if (gv == 0.0) continue;
                        double* gwp = gw.ptr() + co * cin2;
                        for (int64_t ci = 0; ci < cin2; ++ci) gwp[ci] += gv * xp[ci];
                    }
                }
                if (nb) {
                    Tensor& gb = tp.grad_of(ib);
                    for (int64_t co = 0; co < cout2; ++co) gb[co] += gp[co];
                }
            }
        });
    }
    return o;
}

// scores = Q @ K^T: q [B,N,D], k [B,M,D] -> [B,N,M]
inline Value matmul_qk(Tape& t, Value q, Value k) {
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    int64_t B = qv.dim(0), N = qv.dim(1), D = qv.dim(2), M = kv.dim(1);
    if (kv.dim(0) != B || kv.dim(2) != D) throw std::invalid_argument("matmul_qk: shapes");
    Tensor y({B, N, M});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
            const double* qp = qv.ptr() + (b * N + n) * D;
            double* yp = y.ptr() + (b * N + n) * M;
            for (int64_t m = 0; m < M; ++m) {
                const double* kp = kv.ptr() + (b * M + m) * D;
                double acc = 0.0;
                for (int64_t d = 0; d < D; ++d) acc += qp[d] * kp[d];
                yp[m] = acc;
            }
        }
    bool rg = t.needs(q) || t.needs(k);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, iq = q.id, ik = k.id;
        bool nq = t.needs(q), nk = t.needs(k);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& qv2 = tp.nodes[static_cast<size_t>(iq)].val;
            const Tensor& kv2 = tp.nodes[static_cast<size_t>(ik)].val;
            int64_t B2 = qv2.dim(0), N2 = qv2.dim(1), D2 = qv2.dim(2), M2 = kv2.dim(1);
            for (int64_t b = 0; b < B2; ++b)
                for (int64_t n = 0; n < N2; ++n) {
                    const double* gp = g.ptr() + (b * N2 + n) * M2;
                    const double* qp = qv2.ptr() + (b * N2 + n) * D2;
                    for (int64_t m = 0; m < M2; ++m) {
                        double gv = gp[m];
                        if (gv == 0.0) continue;
                        const double* kp = kv2.ptr() + (b * M2 + m) * D2;
                        if (nq) {
                            double* gq = tp.grad_of(iq).ptr() + (b * N2 + n) * D2;
                            for (int64_t d = 0; d < D2; ++d) gq[d] += gv * kp[d];
                        }
                        if (nk) {
                            double* gk = tp.grad_of(ik).ptr() + (b * M2 + m) * D2;
                            for (int64_t d = 0; d < D2; ++d) gk[d] += gv * qp[d];
                        }
                    }
                }
        });
    }
    return o;
}

// out = A @ V: a [B,N,M], v [B,M,D] -> [B,N,D]
inline Value matmul_av(Tape& t, Value a, Value v) {
    const Tensor& av = t.val(a);
    const Tensor& vv = t.val(v);
    int64_t B = av.dim(0), N = av.dim(1), M = av.dim(2), D = vv.dim(2);
    if (vv.dim(0) != B || vv.dim(1) != M) throw std::invalid_argument("matmul_av: shapes");
    Tensor y({B, N, D});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
            const double* ap = av.ptr() + (b * N + n) * M;
            double* yp = y.ptr() + (b * N + n) * D;
            for (int64_t m = 0; m < M; ++m) {
                double w = ap[m];
                if (w == 0.0) continue;
                const double* vp = vv.ptr() + (b * M + m) * D;
                for (int64_t d = 0; d < D; ++d) yp[d] += w * vp[d];
            }
        }
    bool rg = t.needs(a) || t.needs(v);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ia = a.id, iv = v.id;
        bool na = t.needs(a), nv = t.needs(v);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& av2 = tp.nodes[static_cast<size_t>(ia)].val;
            const Tensor& vv2 = tp.nodes[static_cast<size_t>(iv)].val;
            int64_t B2 = av2.dim(0), N2 = av2.dim(1), M2 = av2.dim(2), D2 = vv2.dim(2);
            for (int64_t b = 0; b < B2; ++b)
                for (int64_t n = 0; n < N2; ++n) {
                    const double* gp = g.ptr() + (b * N2 + n) * D2;
                    const double* ap = av2.ptr() + (b * N2 + n) * M2;
                    for (int64_t m = 0; m < M2; ++m) {
                        const double* vp = vv2.ptr() + (b * M2 + m) * D2;
                        if (na) {
                            double acc = 0.0;
                            for (int64_t d = 0; d < D2; ++d) acc += gp[d] * vp[d];
                            tp.grad_of(ia)[(b * N2 + n) * M2 + m] += acc;
                        }
                        if (nv) {
                            double w = ap[m];
                            if (w != 0.0) {
                                double* gv = tp.grad_of(iv).ptr() + (b * M2 + m) * D2;
                                for (int64_t d = 0; d < D2; ++d) gv[d] += w * gp[d];
                            }
                        }
                    }
                }
        });
    }
    return o;
}

// scores against a context shared across the batch: q [B,N,D], k [M,D] -> [B,N,M]
inline Value matmul_qk_shared(Tape& t, Value q, Value k) {
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    int64_t B = qv.dim(0), N = qv.dim(1), D = qv.dim(2), M = kv.dim(0);
    if (kv.dim(1) != D) throw std::invalid_argument("matmul_qk_shared: shapes");
    Tensor y({B, N, M});
    for (int64_t r = 0; r < B * N; ++r) {
        const double* qp = qv.ptr() + r * D;
        double* yp = y.ptr() + r * M;
        for (int64_t m = 0; m < M; ++m) {
            const double* kp = kv.ptr() + m * D;
            double acc = 0.0;
            for (int64_t d = 0; d < D; ++d) acc += qp[d] * kp[d];
            yp[m] = acc;
        }
    }
    bool rg = t.needs(q) || t.needs(k);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, iq = q.id, ik = k.id;
        bool nq = t.needs(q), nk = t.needs(k);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& qv2 = tp.nodes[static_cast<size_t>(iq)].val;
            const Tensor& kv2 = tp.nodes[static_cast<size_t>(ik)].val;
            int64_t D2 = qv2.dim(2), M2 = kv2.dim(0);
            int64_t R = qv2.dim(0) * qv2.dim(1);
            for (int64_t r = 0; r < R; ++r) {
                const double* gp = g.ptr() + r * M2;
                const double* qp = qv2.ptr() + r * D2;
                for (int64_t m = 0; m < M2; ++m) {
                    double gv = gp[m];
                    if (gv == 0.0) continue;
                    const double* kp = kv2.ptr() + m * D2;
                    if (nq) {
                        double* gq = tp.grad_of(iq).ptr() + r * D2;
                        for (int64_t d = 0; d < D2; ++d) gq[d] += gv * kp[d];
                    }
                    if (nk) {
                        double* gk = tp.grad_of(ik).ptr() + m * D2;
                        for (int64_t d = 0; d < D2; ++d) gk[d] += gv * qp[d];
                    }
                }
            }
        });
    }
    return o;
}

// out = A @ V with shared V: a [B,N,M], v [M,D] -> [B,N,D]
inline Value matmul_av_shared(Tape& t, Value a, Value v) {
    const Tensor& av = t.val(a);
    const Tensor& vv = t.val(v);
    int64_t B = av.dim(0), N = av.dim(1), M = av.dim(2), D = vv.dim(1);
    if (vv.dim(0) != M) throw std::invalid_argument("matmul_av_shared: shapes");
    Tensor y({B, N, D});
    for (int64_t r = 0; r < B * N; ++r) {
        const double* ap = av.ptr() + r * M;
        double* yp = y.ptr() + r * D;
        for (int64_t m = 0; m < M; ++m) {
            double w = ap[m];
            if (w == 0.0) continue;
            const double* vp = vv.ptr() + m * D;
            for (int64_t d = 0; d < D; ++d) yp[d] += w * vp[d];
        }
    }
    bool rg = t.needs(a) || t.needs(v);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ia = a.id, iv = v.id;
        bool na = t.needs(a), nv = t.needs(v);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& av2 = tp.nodes[static_cast<size_t>(ia)].val;
            const Tensor& vv2 = tp.nodes[static_cast<size_t>(iv)].val;
            int64_t M2 = av2.dim(2), D2 = vv2.dim(1);
            int64_t R = av2.dim(0) * av2.dim(1);
            for (int64_t r = 0; r < R; ++r) {
                const double* gp = g.ptr() + r * D2;
                const double* ap = av2.ptr() + r * M2;
                for (int64_t m = 0; m < M2; ++m) {
                    const double* vp = vv2.ptr() + m * D2;
                    if (na) {
                        double acc = 0.0;
                        for (int64_t d = 0; d < D2; ++d) acc += gp[d] * vp[d];
                        tp.grad_of(ia)[r * M2 + m] += acc;
                    }
                    if (nv && ap[m] != 0.0) {
                        double* gv = tp.grad_of(iv).ptr() + m * D2;
                        double w = ap[m];
                        for (int64_t d = 0; d < D2; ++d) gv[d] += w * gp[d];
                    }
                }
            }
        });
    }
    return o;
}

inline Value softmax_last(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t L = xv.shape.back();
    int64_t rows = xv.numel() / L;
    Tensor y(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = xv.ptr() + r * L;
        double* yp = y.ptr() + r * L;
        double mx = xp[0];
        for (int64_t i = 1; i < L; ++i) mx = std::max(mx, xp[i]);
        double s = 0.0;
        for (int64_t i = 0; i < L; ++i) {
            yp[i] = std::exp(xp[i] - mx);
            s += yp[i];
        }
        for (int64_t i = 0; i < L; ++i) yp[i] /= s;
    }
    Value o = t.push(std::move(y), t.needs(x));
    if (t.needs(o)) {
        int oid = o.id, ix = x.id;
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& yv = tp.nodes[static_cast<size_t>(oid)].val;
            Tensor& gx = tp.grad_of(ix);
            int64_t L2 = yv.shape.back();
            int64_t rows2 = yv.numel() / L2;
            for (int64_t r = 0; r < rows2; ++r) {
                const double* gp = g.ptr() + r * L2;
                const double* yp = yv.ptr() + r * L2;
                double dot = 0.0;
                for (int64_t i = 0; i < L2; ++i) dot += gp[i] * yp[i];
                double* gxp = gx.ptr() + r * L2;
                for (int64_t i = 0; i < L2; ++i) gxp[i] += yp[i] * (gp[i] - dot);
            }
        });
    }
    return o;
}

namespace detail {
// generic gather: y[i] = x[idx[i]]; backward scatters
inline Value permute(Tape& t, Value x, std::vector<int64_t> oshape,
                     std::vector<int64_t> src_index) {
    const Tensor& xv = t.val(x);
    Tensor y(std::move(oshape));
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = xv[src_index[static_cast<size_t>(i)]];
    Value o = t.push(std::move(y), t.needs(x));
    if (t.needs(o)) {
        int oid = o.id, ix = x.id;
        t.set_pull(o, [oid, ix, idx = std::move(src_index)](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            Tensor& gx = tp.grad_of(ix);
            for (int64_t i = 0; i < g.numel(); ++i) gx[idx[static_cast<size_t>(i)]] += g[i];
        });
    }
    return o;
}
}  // namespace detail

// [f,c,h,w] -> [f, h*w, c] (spatial attention tokens, batch = frames)
inline Value to_tokens_spatial(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t f = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    std::vector<int64_t> idx(static_cast<size_t>(xv.numel()));
    int64_t p = 0;
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t s = 0; s < h * w; ++s)
            for (int64_t ci = 0; ci < c; ++ci) idx[p++] = ((fi * c + ci) * h * w) + s;
    return detail::permute(t, x, {f, h * w, c}, std::move(idx));
}

inline Value from_tokens_spatial(Tape& t, Value x, int64_t h, int64_t w) {
    const Tensor& xv = t.val(x);
    int64_t f = xv.dim(0), hw = xv.dim(1), c = xv.dim(2);
    std::vector<int64_t> idx(static_cast<size_t>(xv.numel()));
    int64_t p = 0;
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t s = 0; s < hw; ++s) idx[p++] = (fi * hw + s) * c + ci;
    return detail::permute(t, x, {f, c, h, w}, std::move(idx));
}

// [f,c,h,w] -> [h*w, f, c] (temporal attention tokens, batch = pixels)
inline Value to_tokens_temporal(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t f = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    std::vector<int64_t> idx(static_cast<size_t>(xv.numel()));
    int64_t p = 0;
    for (int64_t s = 0; s < h * w; ++s)
        for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t ci = 0; ci < c; ++ci) idx[p++] = ((fi * c + ci) * h * w) + s;
    return detail::permute(t, x, {h * w, f, c}, std::move(idx));
}

inline Value from_tokens_temporal(Tape& t, Value x, int64_t h, int64_t w) {
    const Tensor& xv = t.val(x);
    int64_t hw = xv.dim(0), f = xv.dim(1), c = xv.dim(2);
    std::vector<int64_t> idx(static_cast<size_t>(xv.numel()));
    int64_t p = 0;
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t s = 0; s < hw; ++s) idx[p++] = (s * f + fi) * c + ci;
    return detail::permute(t, x, {f, c, h, w}, std::move(idx));
}

// x [B,N,C] + pe [N,C], pe constant
inline Value add_rows_const(Tape& t, Value x, const Tensor& pe) {
    const Tensor& xv = t.val(x);
    int64_t B = xv.dim(0), N = xv.dim(1), C = xv.dim(2);
    if (pe.dim(0) != N || pe.dim(1) != C) throw std::invalid_argument("add_rows_const: shapes");
    Tensor y = xv;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < N * C; ++i) y[b * N * C + i] += pe[i];
    Value o = t.push(std::move(y), t.needs(x));
    if (t.needs(o)) {
        int oid = o.id, ix = x.id;
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            Tensor& gx = tp.grad_of(ix);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        });
    }
    return o;
}

// x [n,c,h,w] + b[c] broadcast (timestep embedding injection)
inline Value add_channel_vec(Tape& t, Value x, Value b) {
    const Tensor& xv = t.val(x);
    const Tensor& bv = t.val(b);
    int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    if (bv.numel() != c) throw std::invalid_argument("add_channel_vec: shapes");
    Tensor y = xv;
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ci = 0; ci < c; ++ci) {
            double add = bv[ci];
            double* yp = y.ptr() + (in * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) yp[i] += add;
        }
    bool rg = t.needs(x) || t.needs(b);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ix = x.id, ib = b.id;
        bool nx = t.needs(x), nb = t.needs(b);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            int64_t n2 = g.dim(0), c2 = g.dim(1), hw2 = g.dim(2) * g.dim(3);
            if (nx) {
                Tensor& gx = tp.grad_of(ix);
                for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
            }
            if (nb) {
                Tensor& gb = tp.grad_of(ib);
                for (int64_t in = 0; in < n2; ++in)
                    for (int64_t ci = 0; ci < c2; ++ci) {
                        const double* gp = g.ptr() + (in * c2 + ci) * hw2;
                        double s = 0.0;
                        for (int64_t i = 0; i < hw2; ++i) s += gp[i];
                        gb[ci] += s;
                    }
            }
        });
    }
    return o;
}

// y = x * (1 + s_c) + b_c with per-channel scale/shift vectors (FiLM)
inline Value scale_shift_channels(Tape& t, Value x, Value s, Value b) {
    const Tensor& xv = t.val(x);
    const Tensor& sv = t.val(s);
    const Tensor& bv = t.val(b);
    int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    if (sv.numel() != c || bv.numel() != c)
        throw std::invalid_argument("scale_shift_channels: vector sizes");
    Tensor y = xv;
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ci = 0; ci < c; ++ci) {
            double g = 1.0 + sv[ci], add = bv[ci];
            double* yp = y.ptr() + (in * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) yp[i] = yp[i] * g + add;
        }
    bool rg = t.needs(x) || t.needs(s) || t.needs(b);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ix = x.id, is = s.id, ib = b.id;
        bool nx = t.needs(x), ns = t.needs(s), nb = t.needs(b);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            const Tensor& xv2 = tp.nodes[static_cast<size_t>(ix)].val;
            const Tensor& sv2 = tp.nodes[static_cast<size_t>(is)].val;
            int64_t n2 = g.dim(0), c2 = g.dim(1), hw2 = g.dim(2) * g.dim(3);
            for (int64_t in = 0; in < n2; ++in)
                for (int64_t ci = 0; ci < c2; ++ci) {
                    const double* gp = g.ptr() + (in * c2 + ci) * hw2;
                    const double* xp = xv2.ptr() + (in * c2 + ci) * hw2;
                    if (nx) {
                        double gain = 1.0 + sv2[ci];
                        double* gx = tp.grad_of(ix).ptr() + (in * c2 + ci) * hw2;
                        for (int64_t i = 0; i < hw2; ++i) gx[i] += gp[i] * gain;
                    }
                    if (ns) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < hw2; ++i) acc += gp[i] * xp[i];
                        tp.grad_of(is)[ci] += acc;
                    }
                    if (nb) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < hw2; ++i) acc += gp[i];
                        tp.grad_of(ib)[ci] += acc;
                    }
                }
        });
    }
    return o;
}

// split a vector [2c] into two [c] views (for chunked projections)
inline std::pair<Value, Value> split_vec2(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t c = xv.numel() / 2;
    Tensor a({c}), b({c});
    for (int64_t i = 0; i < c; ++i) {
        a[i] = xv[i];
        b[i] = xv[c + i];
    }
    bool rg = t.needs(x);
    Value oa = t.push(std::move(a), rg);
    Value ob = t.push(std::move(b), rg);
    if (rg) {
        int ix = x.id, ia = oa.id, ibn = ob.id;
        t.set_pull(oa, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(ia);
            Tensor& gx = tp.grad_of(ix);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        });
        t.set_pull(ob, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(ibn);
            Tensor& gx = tp.grad_of(ix);
            int64_t c2 = g.numel();
            for (int64_t i = 0; i < c2; ++i) gx[c2 + i] += g[i];
        });
    }
    return {oa, ob};
}

inline Value concat_channels(Tape& t, Value a, Value b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    int64_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), h = av.dim(2), w = av.dim(3);
    if (bv.dim(0) != n || bv.dim(2) != h || bv.dim(3) != w)
        throw std::invalid_argument("concat_channels: shapes");
    Tensor y({n, ca + cb, h, w});
    int64_t hw = h * w;
    for (int64_t in = 0; in < n; ++in) {
        std::memcpy(y.ptr() + in * (ca + cb) * hw, av.ptr() + in * ca * hw,
                    static_cast<size_t>(ca * hw) * sizeof(double));
        std::memcpy(y.ptr() + (in * (ca + cb) + ca) * hw, bv.ptr() + in * cb * hw,
                    static_cast<size_t>(cb * hw) * sizeof(double));
    }
    bool rg = t.needs(a) || t.needs(b);
    Value o = t.push(std::move(y), rg);
    if (rg) {
        int oid = o.id, ia = a.id, ib = b.id;
        bool na = t.needs(a), nb = t.needs(b);
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            int64_t n2 = g.dim(0), ct = g.dim(1), hw2 = g.dim(2) * g.dim(3);
            int64_t ca2 = na ? tp.nodes[static_cast<size_t>(ia)].val.dim(1)
                             : ct - tp.nodes[static_cast<size_t>(ib)].val.dim(1);
            for (int64_t in = 0; in < n2; ++in) {
                if (na) {
                    double* ga = tp.grad_of(ia).ptr() + in * ca2 * hw2;
                    const double* gp = g.ptr() + in * ct * hw2;
                    for (int64_t i = 0; i < ca2 * hw2; ++i) ga[i] += gp[i];
                }
                if (nb) {
                    int64_t cb2 = ct - ca2;
                    double* gb = tp.grad_of(ib).ptr() + in * cb2 * hw2;
                    const double* gp = g.ptr() + (in * ct + ca2) * hw2;
                    for (int64_t i = 0; i < cb2 * hw2; ++i) gb[i] += gp[i];
                }
            }
        });
    }
    return o;
}

inline Value upsample_nearest2x(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor y({n, c, h * 2, w * 2});
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const double* xp = xv.ptr() + nc * h * w;
        double* yp = y.ptr() + nc * 4 * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                double v = xp[i * w + j];
                yp[(2 * i) * 2 * w + 2 * j] = v;
                yp[(2 * i) * 2 * w + 2 * j + 1] = v;
                yp[(2 * i + 1) * 2 * w + 2 * j] = v;
                yp[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
            }
    }
    Value o = t.push(std::move(y), t.needs(x));
    if (t.needs(o)) {
        int oid = o.id, ix = x.id;
        t.set_pull(o, [=](Tape& tp) {
            const Tensor& g = tp.grad_of(oid);
            Tensor& gx = tp.grad_of(ix);
            int64_t n2 = gx.dim(0), c2 = gx.dim(1), h2 = gx.dim(2), w2 = gx.dim(3);
            for (int64_t nc = 0; nc < n2 * c2; ++nc) {
                const double* gp = g.ptr() + nc * 4 * h2 * w2;
                double* gxp = gx.ptr() + nc * h2 * w2;
                for (int64_t i = 0; i < h2; ++i)
                    for (int64_t j = 0; j < w2; ++j)
                        gxp[i * w2 + j] += gp[(2 * i) * 2 * w2 + 2 * j] +
                                           gp[(2 * i) * 2 * w2 + 2 * j + 1] +
                                           gp[(2 * i + 1) * 2 * w2 + 2 * j] +
                                           gp[(2 * i + 1) * 2 * w2 + 2 * j + 1];
            }
        });
    }
    return o;
}

// mean over elements of (a - target)^2, target constant
inline Value mean_sq_diff(Tape& t, Value a, const Tensor& target) {
    const Tensor& av = t.val(a);
    check_same_shape(av, target, "mean_sq_diff");
    double s = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        double d = av[i] - target[i];
        s += d * d;
    }
    Tensor y({1});
    y[0] = s / static_cast<double>(av.numel());
    Value o = t.push(std::move(y), t.needs(a));
    if (t.needs(o)) {
        int oid = o.id, ia = a.id;
        t.set_pull(o, [oid, ia, target](Tape& tp) {
            double g = tp.grad_of(oid)[0];
            const Tensor& av2 = tp.nodes[static_cast<size_t>(ia)].val;
            Tensor& ga = tp.grad_of(ia);
            double c = 2.0 * g / static_cast<double>(av2.numel());
            for (int64_t i = 0; i < av2.numel(); ++i) ga[i] += c * (av2[i] - target[i]);
        });
    }
    return o;
}

// sum(a * weights), weights constant; probe loss for gradient checks
inline Value weighted_sum(Tape& t, Value a, const Tensor& weights) {
    const Tensor& av = t.val(a);
    check_same_shape(av, weights, "weighted_sum");
    double s = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) s += av[i] * weights[i];
    Tensor y({1});
    y[0] = s;
    Value o = t.push(std::move(y), t.needs(a));
    if (t.needs(o)) {
        int oid = o.id, ia = a.id;
        t.set_pull(o, [oid, ia, weights](Tape& tp) {
            double g = tp.grad_of(oid)[0];
            Tensor& ga = tp.grad_of(ia);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g * weights[i];
        });
    }
    return o;
}

}  // namespace ops
}  // namespace diffueraser

#endif
