#include "nslam/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace nslam::ad {

namespace {

constexpr real kCosineEps = 1e-8;

real stable_sigmoid(real x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    real e = std::exp(x);
    return e / (1.0 + e);
}

real stable_softplus(real x) {
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_same_tape(const char* op, const Var& a, const Var& b) {
    require(a.valid() && b.valid() && a.tape == b.tape,
            std::string(op) + ": operands must live on the same tape");
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

int Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(Tensor v) {
    int id = push(std::move(v), true, nullptr);
    return Var{this, id};
}

Var Tape::borrow(const Tensor* v) {
    Node n;
    n.external = v;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor v) {
    int id = push(std::move(v), false, nullptr);
    return Var{this, id};
}

const Tensor& Tape::value(const Var& v) const { return node_value(v.id); }

const Tensor& Tape::grad(const Var& v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    return n.grad.data.empty() ? empty_ : n.grad;
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) {
        const Tensor& v = node_value(id);
        n.grad = Tensor(v.shape, 0.0);
    }
    return n.grad;
}

void Tape::zero_grads() {
    for (Node& n : nodes_) {
        n.grad.shape.clear();
        n.grad.data.clear();
    }
}

void Tape::backward(const Var& loss) {
    require(loss.valid() && loss.tape == this, "backward: loss not on this tape");
    require(node_value(loss.id).numel() == 1, "backward: loss must be scalar");
    grad_buffer(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad || n.grad.data.empty() || !n.back) continue;
        n.back(*this, id);
    }
}

void Tape::reset() {
    nodes_.clear();
}

// Ops access node internals through this builder. A node records a backward
// closure only when some input requires grad, so constant-only subgraphs cost
// nothing at backward time.
class OpBuilder {
public:
    static bool requires(const Var& v) {
        return v.tape->nodes_[static_cast<size_t>(v.id)].requires_grad;
    }
    static Var make(Tape& t, Tensor value, std::initializer_list<Var> inputs,
                    std::function<void(Tape&, int)> back) {
        bool rg = false;
        for (const Var& v : inputs) rg = rg || requires(v);
        int id = t.push(std::move(value), rg, rg ? std::move(back) : nullptr);
        return Var{&t, id};
    }
    static const Tensor& val(Tape& t, int id) { return t.node_value(id); }
    static Tensor& gbuf(Tape& t, int id) { return t.grad_buffer(id); }
    static const Tensor& ograd(Tape& t, int id) {
        return t.nodes_[static_cast<size_t>(id)].grad;
    }
    static bool node_requires(Tape& t, int id) {
        return t.nodes_[static_cast<size_t>(id)].requires_grad;
    }
};

using OB = OpBuilder;

Var add(const Var& a, const Var& b) {
    check_same_tape("add", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    check_same_shape("add", av, bv);
    Tensor out(av.shape);
    for (int i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    int ai = a.id, bi = b.id;
    return OB::make(*a.tape, std::move(out), {a, b}, [ai, bi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        if (OB::node_requires(t, ai)) {
            Tensor& ga = OB::gbuf(t, ai);
            for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (OB::node_requires(t, bi)) {
            Tensor& gb = OB::gbuf(t, bi);
            for (int i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_tape("sub", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    check_same_shape("sub", av, bv);
    Tensor out(av.shape);
    for (int i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
    int ai = a.id, bi = b.id;
    return OB::make(*a.tape, std::move(out), {a, b}, [ai, bi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        if (OB::node_requires(t, ai)) {
            Tensor& ga = OB::gbuf(t, ai);
            for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (OB::node_requires(t, bi)) {
            Tensor& gb = OB::gbuf(t, bi);
            for (int i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_tape("mul", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    check_same_shape("mul", av, bv);
    Tensor out(av.shape);
    for (int i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    int ai = a.id, bi = b.id;
    return OB::make(*a.tape, std::move(out), {a, b}, [ai, bi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& av2 = OB::val(t, ai);
        const Tensor& bv2 = OB::val(t, bi);
        if (OB::node_requires(t, ai)) {
            Tensor& ga = OB::gbuf(t, ai);
            for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (OB::node_requires(t, bi)) {
            Tensor& gb = OB::gbuf(t, bi);
            for (int i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
        }
    });
}

Var scale(const Var& v, const Var& s) {
    check_same_tape("scale", v, s);
    require(s.value().numel() == 1, "scale: scale factor must be 1-element, got " +
                                        s.value().shape_str());
    const Tensor& vv = v.value();
    real sv = s.value()[0];
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = vv[i] * sv;
    int vi = v.id, si = s.id;
    return OB::make(*v.tape, std::move(out), {v, s}, [vi, si](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& vv2 = OB::val(t, vi);
        real sv2 = OB::val(t, si)[0];
        if (OB::node_requires(t, vi)) {
            Tensor& gv = OB::gbuf(t, vi);
            for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] * sv2;
        }
        if (OB::node_requires(t, si)) {
            real acc = 0;
            for (int i = 0; i < g.numel(); ++i) acc += g[i] * vv2[i];
            OB::gbuf(t, si)[0] += acc;
        }
    });
}

Var scale_const(const Var& v, real c) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = vv[i] * c;
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi, c](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] * c;
    });
}

Var add_const(const Var& v, real c) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = vv[i] + c;
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i];
    });
}

Var matvec(const Var& w, const Var& x) {
    check_same_tape("matvec", w, x);
    const Tensor& wv = w.value();
    const Tensor& xv = x.value();
    require(wv.shape.size() == 2, "matvec: weight must be rank-2, got " + wv.shape_str());
    require(xv.shape.size() == 1 && xv.shape[0] == wv.shape[1],
            "matvec: shape mismatch " + wv.shape_str() + " x " + xv.shape_str());
    int m = wv.shape[0], n = wv.shape[1];
    Tensor out({m});
    for (int r = 0; r < m; ++r) {
        real acc = 0;
        const real* row = wv.data.data() + static_cast<size_t>(r) * n;
        for (int c = 0; c < n; ++c) acc += row[c] * xv[c];
        out[r] = acc;
    }
    int wi = w.id, xi = x.id;
    return OB::make(*w.tape, std::move(out), {w, x}, [wi, xi, m, n](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& wv2 = OB::val(t, wi);
        const Tensor& xv2 = OB::val(t, xi);
        if (OB::node_requires(t, wi)) {
            Tensor& gw = OB::gbuf(t, wi);
            for (int r = 0; r < m; ++r) {
                real gr = g[r];
                real* grow = gw.data.data() + static_cast<size_t>(r) * n;
                for (int c = 0; c < n; ++c) grow[c] += gr * xv2[c];
            }
        }
        if (OB::node_requires(t, xi)) {
            Tensor& gx = OB::gbuf(t, xi);
            for (int r = 0; r < m; ++r) {
                real gr = g[r];
                const real* row = wv2.data.data() + static_cast<size_t>(r) * n;
                for (int c = 0; c < n; ++c) gx[c] += gr * row[c];
            }
        }
    });
}

Var sigmoid(const Var& v) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = stable_sigmoid(vv[i]);
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& y = OB::val(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var tanh_op(const Var& v) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = std::tanh(vv[i]);
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& y = OB::val(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var softplus(const Var& v) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = stable_softplus(vv[i]);
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& x = OB::val(t, vi);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] * stable_sigmoid(x[i]);
    });
}

Var exp_op(const Var& v) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = std::exp(vv[i]);
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& y = OB::val(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] * y[i];
    });
}

Var log_op(const Var& v) {
    const Tensor& vv = v.value();
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = std::log(vv[i]);
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& x = OB::val(t, vi);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] / x[i];
    });
}

Var pow_scalar(const Var& v, const Var& p) {
    check_same_tape("pow_scalar", v, p);
    require(p.value().numel() == 1, "pow_scalar: exponent must be 1-element, got " +
                                        p.value().shape_str());
    const Tensor& vv = v.value();
    real pv = p.value()[0];
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = std::pow(vv[i], pv);
    int vi = v.id, pi = p.id;
    return OB::make(*v.tape, std::move(out), {v, p}, [vi, pi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& x = OB::val(t, vi);
        const Tensor& y = OB::val(t, self);
        real pv2 = OB::val(t, pi)[0];
        if (OB::node_requires(t, vi)) {
            Tensor& gv = OB::gbuf(t, vi);
            for (int i = 0; i < g.numel(); ++i) {
                real d;
                if (x[i] == 0.0) {
                    d = (pv2 == 1.0) ? 1.0 : 0.0;  // lim x->0+ of p*x^(p-1), p >= 1
                } else {
                    d = pv2 * std::pow(x[i], pv2 - 1.0);
                }
                gv[i] += g[i] * d;
            }
        }
        if (OB::node_requires(t, pi)) {
            real acc = 0;
            for (int i = 0; i < g.numel(); ++i) {
                if (x[i] > 0.0) acc += g[i] * y[i] * std::log(x[i]);
                // x == 0: x^p * ln x -> 0 for p >= 1
            }
            OB::gbuf(t, pi)[0] += acc;
        }
    });
}

Var softmax(const Var& v) {
    const Tensor& vv = v.value();
    require(vv.numel() > 0, "softmax: empty input");
    Tensor out(vv.shape);
    real mx = vv[0];
    for (int i = 1; i < vv.numel(); ++i) mx = std::max(mx, vv[i]);
    real s = 0;
    for (int i = 0; i < vv.numel(); ++i) {
        out[i] = std::exp(vv[i] - mx);
        s += out[i];
    }
    for (int i = 0; i < vv.numel(); ++i) out[i] /= s;
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& y = OB::val(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        real dot = 0;
        for (int i = 0; i < g.numel(); ++i) dot += g[i] * y[i];
        for (int i = 0; i < g.numel(); ++i) gv[i] += y[i] * (g[i] - dot);
    });
}

Var log_softmax(const Var& v) {
    const Tensor& vv = v.value();
    require(vv.numel() > 0, "log_softmax: empty input");
    Tensor out(vv.shape);
    real mx = vv[0];
    for (int i = 1; i < vv.numel(); ++i) mx = std::max(mx, vv[i]);
    real s = 0;
    for (int i = 0; i < vv.numel(); ++i) s += std::exp(vv[i] - mx);
    real lse = mx + std::log(s);
    for (int i = 0; i < vv.numel(); ++i) out[i] = vv[i] - lse;
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& y = OB::val(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        real gsum = 0;
        for (int i = 0; i < g.numel(); ++i) gsum += g[i];
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] - gsum * std::exp(y[i]);
    });
}

Var concat(const Var& a, const Var& b) {
    check_same_tape("concat", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out({av.numel() + bv.numel()});
    for (int i = 0; i < av.numel(); ++i) out[i] = av[i];
    for (int i = 0; i < bv.numel(); ++i) out[av.numel() + i] = bv[i];
    int ai = a.id, bi = b.id, na = av.numel();
    return OB::make(*a.tape, std::move(out), {a, b}, [ai, bi, na](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        if (OB::node_requires(t, ai)) {
            Tensor& ga = OB::gbuf(t, ai);
            for (int i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (OB::node_requires(t, bi)) {
            Tensor& gb = OB::gbuf(t, bi);
            for (int i = 0; i < g.numel() - na; ++i) gb[i] += g[na + i];
        }
    });
}

Var slice(const Var& v, int offset, int len) {
    const Tensor& vv = v.value();
    require(offset >= 0 && len >= 0 && offset + len <= vv.numel(),
            "slice: range [" + std::to_string(offset) + "," + std::to_string(offset + len) +
                ") out of bounds for " + vv.shape_str());
    Tensor out({len});
    for (int i = 0; i < len; ++i) out[i] = vv[offset + i];
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi, offset, len](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < len; ++i) gv[offset + i] += g[i];
    });
}

Var sum(const Var& v) {
    const Tensor& vv = v.value();
    Tensor out = Tensor::scalar(vv.sum());
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi](Tape& t, int self) {
        real g = OB::ograd(t, self)[0];
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < gv.numel(); ++i) gv[i] += g;
    });
}

Var cosine_sim(const Var& u, const Var& v) {
    check_same_tape("cosine_sim", u, v);
    const Tensor& uv = u.value();
    const Tensor& vv = v.value();
    check_same_shape("cosine_sim", uv, vv);
    real dot = 0, nu2 = 0, nv2 = 0;
    for (int i = 0; i < uv.numel(); ++i) {
        dot += uv[i] * vv[i];
        nu2 += uv[i] * uv[i];
        nv2 += vv[i] * vv[i];
    }
    real nu = std::sqrt(nu2), nv = std::sqrt(nv2);
    real denom = nu * nv + kCosineEps;
    Tensor out = Tensor::scalar(dot / denom);
    int ui = u.id, vi = v.id;
    return OB::make(*u.tape, std::move(out), {u, v}, [ui, vi](Tape& t, int self) {
        real g = OB::ograd(t, self)[0];
        const Tensor& uv2 = OB::val(t, ui);
        const Tensor& vv2 = OB::val(t, vi);
        real dot = 0, nu2 = 0, nv2 = 0;
        for (int i = 0; i < uv2.numel(); ++i) {
            dot += uv2[i] * vv2[i];
            nu2 += uv2[i] * uv2[i];
            nv2 += vv2[i] * vv2[i];
        }
        real nu = std::sqrt(nu2), nv = std::sqrt(nv2);
        real denom = nu * nv + kCosineEps;
        real d2 = denom * denom;
        if (OB::node_requires(t, ui)) {
            Tensor& gu = OB::gbuf(t, ui);
            real coef = (nu > 0) ? dot * nv / (nu * d2) : 0.0;
            for (int i = 0; i < uv2.numel(); ++i)
                gu[i] += g * (vv2[i] / denom - coef * uv2[i]);
        }
        if (OB::node_requires(t, vi)) {
            Tensor& gv = OB::gbuf(t, vi);
            real coef = (nv > 0) ? dot * nu / (nv * d2) : 0.0;
            for (int i = 0; i < vv2.numel(); ++i)
                gv[i] += g * (uv2[i] / denom - coef * vv2[i]);
        }
    });
}

Var normalize_sum(const Var& v, real eps) {
    const Tensor& vv = v.value();
    real s = vv.sum() + eps;
    Tensor out(vv.shape);
    for (int i = 0; i < vv.numel(); ++i) out[i] = vv[i] / s;
    int vi = v.id;
    return OB::make(*v.tape, std::move(out), {v}, [vi, eps](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& x = OB::val(t, vi);
        real s = x.sum() + eps;
        real dot = 0;
        for (int i = 0; i < g.numel(); ++i) dot += g[i] * x[i];
        Tensor& gv = OB::gbuf(t, vi);
        for (int i = 0; i < g.numel(); ++i) gv[i] += g[i] / s - dot / (s * s);
    });
}

Var lerp(const Var& a, const Var& b, const Var& g) {
    check_same_tape("lerp", a, b);
    check_same_tape("lerp", a, g);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    check_same_shape("lerp", av, bv);
    require(g.value().numel() == 1, "lerp: gate must be 1-element, got " + g.value().shape_str());
    real gv = g.value()[0];
    Tensor out(av.shape);
    for (int i = 0; i < av.numel(); ++i) out[i] = gv * av[i] + (1.0 - gv) * bv[i];
    int ai = a.id, bi = b.id, gi = g.id;
    return OB::make(*a.tape, std::move(out), {a, b, g}, [ai, bi, gi](Tape& t, int self) {
        const Tensor& og = OB::ograd(t, self);
        const Tensor& av2 = OB::val(t, ai);
        const Tensor& bv2 = OB::val(t, bi);
        real gv2 = OB::val(t, gi)[0];
        if (OB::node_requires(t, ai)) {
            Tensor& ga = OB::gbuf(t, ai);
            for (int i = 0; i < og.numel(); ++i) ga[i] += og[i] * gv2;
        }
        if (OB::node_requires(t, bi)) {
            Tensor& gb = OB::gbuf(t, bi);
            for (int i = 0; i < og.numel(); ++i) gb[i] += og[i] * (1.0 - gv2);
        }
        if (OB::node_requires(t, gi)) {
            real acc = 0;
            for (int i = 0; i < og.numel(); ++i) acc += og[i] * (av2[i] - bv2[i]);
            OB::gbuf(t, gi)[0] += acc;
        }
    });
}

namespace {

inline int wrap(int i, int n) {
    i %= n;
    return i < 0 ? i + n : i;
}

}  // namespace

Var conv3x3(const Var& field, const Var& kernel, ConvBoundary boundary) {
    check_same_tape("conv3x3", field, kernel);
    const Tensor& f = field.value();
    const Tensor& k = kernel.value();
    require(f.shape.size() == 2, "conv3x3: field must be rank-2, got " + f.shape_str());
    require(k.shape == std::vector<int>({3, 3}),
            "conv3x3: kernel must be 3x3, got " + k.shape_str());
    int h = f.shape[0], w = f.shape[1];
    bool circ = boundary == ConvBoundary::Circular;
    Tensor out({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            real acc = 0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    int sy = y - dy, sx = x - dx;
                    if (circ) {
                        sy = wrap(sy, h);
                        sx = wrap(sx, w);
                    } else if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                        continue;
                    }
                    acc += f.at2(sy, sx) * k.at2(dy + 1, dx + 1);
                }
            }
            out.at2(y, x) = acc;
        }
    }
    int fi = field.id, ki = kernel.id;
    return OB::make(*field.tape, std::move(out), {field, kernel},
                    [fi, ki, h, w, circ](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& f2 = OB::val(t, fi);
        const Tensor& k2 = OB::val(t, ki);
        if (OB::node_requires(t, fi)) {
            Tensor& gf = OB::gbuf(t, fi);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    real acc = 0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            int oy = y + dy, ox = x + dx;
                            if (circ) {
                                oy = wrap(oy, h);
                                ox = wrap(ox, w);
                            } else if (oy < 0 || oy >= h || ox < 0 || ox >= w) {
                                continue;
                            }
                            acc += g.at2(oy, ox) * k2.at2(dy + 1, dx + 1);
                        }
                    }
                    gf.at2(y, x) += acc;
                }
            }
        }
        if (OB::node_requires(t, ki)) {
            Tensor& gk = OB::gbuf(t, ki);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    real acc = 0;
                    for (int y = 0; y < h; ++y) {
                        for (int x = 0; x < w; ++x) {
                            int sy = y - dy, sx = x - dx;
                            if (circ) {
                                sy = wrap(sy, h);
                                sx = wrap(sx, w);
                            } else if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                                continue;
                            }
                            acc += g.at2(y, x) * f2.at2(sy, sx);
                        }
                    }
                    gk.at2(dy + 1, dx + 1) += acc;
                }
            }
        }
    });
}

Var content_scores(const Var& memory, const Var& key) {
    check_same_tape("content_scores", memory, key);
    const Tensor& m = memory.value();
    const Tensor& k = key.value();
    require(m.shape.size() == 3, "content_scores: memory must be rank-3, got " + m.shape_str());
    require(k.shape.size() == 1 && k.shape[0] == m.shape[2],
            "content_scores: key " + k.shape_str() + " vs memory " + m.shape_str());
    int h = m.shape[0], w = m.shape[1], c = m.shape[2];
    real nk2 = 0;
    for (int i = 0; i < c; ++i) nk2 += k[i] * k[i];
    real nk = std::sqrt(nk2);
    Tensor out({h, w});
    for (int s = 0; s < h * w; ++s) {
        const real* slot = m.data.data() + static_cast<size_t>(s) * c;
        real dot = 0, ns2 = 0;
        for (int i = 0; i < c; ++i) {
            dot += k[i] * slot[i];
            ns2 += slot[i] * slot[i];
        }
        out[s] = dot / (nk * std::sqrt(ns2) + kCosineEps);
    }
    int mi = memory.id, ki = key.id;
    return OB::make(*memory.tape, std::move(out), {memory, key},
                    [mi, ki, h, w, c](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& m2 = OB::val(t, mi);
        const Tensor& k2 = OB::val(t, ki);
        real nk2 = 0;
        for (int i = 0; i < c; ++i) nk2 += k2[i] * k2[i];
        real nk = std::sqrt(nk2);
        bool need_m = OB::node_requires(t, mi);
        bool need_k = OB::node_requires(t, ki);
        Tensor* gm = need_m ? &OB::gbuf(t, mi) : nullptr;
        Tensor* gk = need_k ? &OB::gbuf(t, ki) : nullptr;
        for (int s = 0; s < h * w; ++s) {
            real gs = g[s];
            if (gs == 0.0) continue;
            const real* slot = m2.data.data() + static_cast<size_t>(s) * c;
            real dot = 0, ns2 = 0;
            for (int i = 0; i < c; ++i) {
                dot += k2[i] * slot[i];
                ns2 += slot[i] * slot[i];
            }
            real ns = std::sqrt(ns2);
            real denom = nk * ns + kCosineEps;
            real d2 = denom * denom;
            if (need_m) {
                real* gslot = gm->data.data() + static_cast<size_t>(s) * c;
                real coef = (ns > 0) ? dot * nk / (ns * d2) : 0.0;
                for (int i = 0; i < c; ++i)
                    gslot[i] += gs * (k2[i] / denom - coef * slot[i]);
            }
            if (need_k) {
                real coef = (nk > 0) ? dot * ns / (nk * d2) : 0.0;
                for (int i = 0; i < c; ++i)
                    (*gk)[i] += gs * (slot[i] / denom - coef * k2[i]);
            }
        }
    });
}

Var memory_write(const Var& memory, const Var& w, const Var& erase, const Var& addv) {
    check_same_tape("memory_write", memory, w);
    check_same_tape("memory_write", memory, erase);
    check_same_tape("memory_write", memory, addv);
    const Tensor& m = memory.value();
    const Tensor& wv = w.value();
    const Tensor& ev = erase.value();
    const Tensor& av = addv.value();
    require(m.shape.size() == 3, "memory_write: memory must be rank-3, got " + m.shape_str());
    require(wv.shape.size() == 2 && wv.shape[0] == m.shape[0] && wv.shape[1] == m.shape[1],
            "memory_write: weight " + wv.shape_str() + " vs memory " + m.shape_str());
    int c = m.shape[2];
    require(ev.numel() == c && av.numel() == c,
            "memory_write: erase/add " + ev.shape_str() + "/" + av.shape_str() +
                " vs memory " + m.shape_str());
    int slots = m.shape[0] * m.shape[1];
    Tensor out(m.shape);
    for (int s = 0; s < slots; ++s) {
        real ws = wv[s];
        const real* src = m.data.data() + static_cast<size_t>(s) * c;
        real* dst = out.data.data() + static_cast<size_t>(s) * c;
        for (int i = 0; i < c; ++i) dst[i] = src[i] * (1.0 - ws * ev[i]) + ws * av[i];
    }
    int mi = memory.id, wi = w.id, ei = erase.id, ai = addv.id;
    return OB::make(*memory.tape, std::move(out), {memory, w, erase, addv},
                    [mi, wi, ei, ai, slots, c](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& m2 = OB::val(t, mi);
        const Tensor& wv2 = OB::val(t, wi);
        const Tensor& ev2 = OB::val(t, ei);
        const Tensor& av2 = OB::val(t, ai);
        bool nm = OB::node_requires(t, mi), nw = OB::node_requires(t, wi);
        bool ne = OB::node_requires(t, ei), na = OB::node_requires(t, ai);
        Tensor* gm = nm ? &OB::gbuf(t, mi) : nullptr;
        Tensor* gw = nw ? &OB::gbuf(t, wi) : nullptr;
        Tensor* ge = ne ? &OB::gbuf(t, ei) : nullptr;
        Tensor* ga = na ? &OB::gbuf(t, ai) : nullptr;
        for (int s = 0; s < slots; ++s) {
            real ws = wv2[s];
            const real* gs = g.data.data() + static_cast<size_t>(s) * c;
            const real* ms = m2.data.data() + static_cast<size_t>(s) * c;
            real wacc = 0;
            for (int i = 0; i < c; ++i) {
                if (nm) (*gm).data[static_cast<size_t>(s) * c + i] += gs[i] * (1.0 - ws * ev2[i]);
                if (nw) wacc += gs[i] * (av2[i] - ms[i] * ev2[i]);
                if (ne) (*ge)[i] += gs[i] * (-ms[i] * ws);
                if (na) (*ga)[i] += gs[i] * ws;
            }
            if (nw) (*gw)[s] += wacc;
        }
    });
}

Var memory_read(const Var& memory, const Var& w) {
    check_same_tape("memory_read", memory, w);
    const Tensor& m = memory.value();
    const Tensor& wv = w.value();
    require(m.shape.size() == 3, "memory_read: memory must be rank-3, got " + m.shape_str());
    require(wv.shape.size() == 2 && wv.shape[0] == m.shape[0] && wv.shape[1] == m.shape[1],
            "memory_read: weight " + wv.shape_str() + " vs memory " + m.shape_str());
    int c = m.shape[2];
    int slots = m.shape[0] * m.shape[1];
    Tensor out({c});
    for (int s = 0; s < slots; ++s) {
        real ws = wv[s];
        if (ws == 0.0) continue;
        const real* slot = m.data.data() + static_cast<size_t>(s) * c;
        for (int i = 0; i < c; ++i) out[i] += ws * slot[i];
    }
    int mi = memory.id, wi = w.id;
    return OB::make(*memory.tape, std::move(out), {memory, w},
                    [mi, wi, slots, c](Tape& t, int self) {
        const Tensor& g = OB::ograd(t, self);
        const Tensor& m2 = OB::val(t, mi);
        const Tensor& wv2 = OB::val(t, wi);
        if (OB::node_requires(t, mi)) {
            Tensor& gm = OB::gbuf(t, mi);
            for (int s = 0; s < slots; ++s) {
                real ws = wv2[s];
                if (ws == 0.0) continue;
                real* gslot = gm.data.data() + static_cast<size_t>(s) * c;
                for (int i = 0; i < c; ++i) gslot[i] += ws * g[i];
            }
        }
        if (OB::node_requires(t, wi)) {
            Tensor& gw = OB::gbuf(t, wi);
            for (int s = 0; s < slots; ++s) {
                const real* slot = m2.data.data() + static_cast<size_t>(s) * c;
                real acc = 0;
                for (int i = 0; i < c; ++i) acc += g[i] * slot[i];
                gw[s] += acc;
            }
        }
    });
}

}  // namespace nslam::ad
