#pragma once

#include <cmath>
#include <memory>

#include "osdmamba/autograd.hpp"

namespace osd {

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline double stable_sigmoid(double x) {
    if (x >= 0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape("add", a->value, b->value);
    Tensor out = a->value;
    out.add_(b->value);
    return make_op(std::move(out), wants_grad(a) || wants_grad(b), [a, b](Node& self, GradMap& gm) {
        if (wants_grad(a)) accumulate_grad(*a, self.grad, gm);
        if (wants_grad(b)) accumulate_grad(*b, self.grad, gm);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape("sub", a->value, b->value);
    Tensor out = a->value;
    out.axpy_(-1.0, b->value);
    return make_op(std::move(out), wants_grad(a) || wants_grad(b), [a, b](Node& self, GradMap& gm) {
        if (wants_grad(a)) accumulate_grad(*a, self.grad, gm);
        if (wants_grad(b)) {
            Tensor g = self.grad;
            g.scale_(-1.0);
            accumulate_grad(*b, g, gm);
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape("mul", a->value, b->value);
    Tensor out(a->value.shape());
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    return make_op(std::move(out), wants_grad(a) || wants_grad(b), [a, b](Node& self, GradMap& gm) {
        const int64_t n = self.grad.numel();
        const double* g = self.grad.data();
        if (wants_grad(a)) {
            Tensor ga(a->value.shape());
            const double* pb = b->value.data();
            for (int64_t i = 0; i < n; ++i) ga[i] = g[i] * pb[i];
            accumulate_grad(*a, ga, gm);
        }
        if (wants_grad(b)) {
            Tensor gb(b->value.shape());
            const double* pa = a->value.data();
            for (int64_t i = 0; i < n; ++i) gb[i] = g[i] * pa[i];
            accumulate_grad(*b, gb, gm);
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    detail::require_same_shape("div", a->value, b->value);
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] / b->value[i];
    return make_op(std::move(out), wants_grad(a) || wants_grad(b), [a, b](Node& self, GradMap& gm) {
        const int64_t n = self.grad.numel();
        if (wants_grad(a)) {
            Tensor ga(a->value.shape());
            for (int64_t i = 0; i < n; ++i) ga[i] = self.grad[i] / b->value[i];
            accumulate_grad(*a, ga, gm);
        }
        if (wants_grad(b)) {
            Tensor gb(b->value.shape());
            for (int64_t i = 0; i < n; ++i)
                gb[i] = -self.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
            accumulate_grad(*b, gb, gm);
        }
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out = a->value;
    out.scale_(s);
    return make_op(std::move(out), wants_grad(a), [a, s](Node& self, GradMap& gm) {
        Tensor g = self.grad;
        g.scale_(s);
        accumulate_grad(*a, g, gm);
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return make_op(std::move(out), wants_grad(a),
                   [a](Node& self, GradMap& gm) { accumulate_grad(*a, self.grad, gm); });
}

// s - x
inline Var rsub_scalar(double s, const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = s - a->value[i];
    return make_op(std::move(out), wants_grad(a), [a](Node& self, GradMap& gm) {
        Tensor g = self.grad;
        g.scale_(-1.0);
        accumulate_grad(*a, g, gm);
    });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// unary nonlinearities
// ---------------------------------------------------------------------------

inline Var exp_op(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a->value[i]);
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), wants_grad(a), [a, saved](Node& self, GradMap& gm) {
        Tensor g(a->value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * (*saved)[i];
        accumulate_grad(*a, g, gm);
    });
}

// log(max(x, floor)); gradient is zero in the clamped region
inline Var log_clamped(const Var& a, double floor = 1e-12) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(a->value[i], floor));
    return make_op(std::move(out), wants_grad(a), [a, floor](Node& self, GradMap& gm) {
        Tensor g(a->value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            double x = a->value[i];
            g[i] = x > floor ? self.grad[i] / x : 0.0;
        }
        accumulate_grad(*a, g, gm);
    });
}

inline Var softplus(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = a->value[i];
        out[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    return make_op(std::move(out), wants_grad(a), [a](Node& self, GradMap& gm) {
        Tensor g(a->value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * detail::stable_sigmoid(a->value[i]);
        accumulate_grad(*a, g, gm);
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = detail::stable_sigmoid(a->value[i]);
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), wants_grad(a), [a, saved](Node& self, GradMap& gm) {
        Tensor g(a->value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = (*saved)[i];
            g[i] = self.grad[i] * s * (1.0 - s);
        }
        accumulate_grad(*a, g, gm);
    });
}

inline Var silu(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = a->value[i];
        out[i] = x * detail::stable_sigmoid(x);
    }
    return make_op(std::move(out), wants_grad(a), [a](Node& self, GradMap& gm) {
        Tensor g(a->value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            double x = a->value[i];
            double s = detail::stable_sigmoid(x);
            g[i] = self.grad[i] * (s + x * s * (1.0 - s));
        }
        accumulate_grad(*a, g, gm);
    });
}

inline Var pow_const(const Var& a, double e) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(a->value[i], e);
    return make_op(std::move(out), wants_grad(a), [a, e](Node& self, GradMap& gm) {
        Tensor g(a->value.shape());
        if (e == 0.0) {
            // x^0 is constant
        } else {
            for (int64_t i = 0; i < g.numel(); ++i)
                g[i] = self.grad[i] * e * std::pow(a->value[i], e - 1.0);
        }
        accumulate_grad(*a, g, gm);
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return make_op(Tensor::scalar(s), wants_grad(a), [a](Node& self, GradMap& gm) {
        Tensor g(a->value.shape(), self.grad[0]);
        accumulate_grad(*a, g, gm);
    });
}

inline Var mean_all(const Var& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2)
        throw DimensionError("matmul expects rank-2 operands");
    const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    if (b->value.dim(0) != k)
        throw DimensionError("matmul: inner axis mismatch " + std::to_string(k) + " vs " +
                             std::to_string(b->value.dim(0)));
    Tensor out(Shape{m, n});
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    double* po = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t l = 0; l < k; ++l) {
            double av = pa[i * k + l];
            if (av == 0.0) continue;
            const double* brow = pb + l * n;
            double* orow = po + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return make_op(std::move(out), wants_grad(a) || wants_grad(b), [a, b, m, k, n](Node& self, GradMap& gm) {
        const double* g = self.grad.data();
        if (wants_grad(a)) {
            Tensor ga(Shape{m, k});
            const double* pb = b->value.data();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t l = 0; l < k; ++l) {
                    double acc = 0.0;
                    const double* brow = pb + l * n;
                    const double* grow = g + i * n;
                    for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + l] = acc;
                }
            accumulate_grad(*a, ga, gm);
        }
        if (wants_grad(b)) {
            Tensor gb(Shape{k, n});
            const double* pa = a->value.data();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t l = 0; l < k; ++l) {
                    double av = pa[i * k + l];
                    if (av == 0.0) continue;
                    const double* grow = g + i * n;
                    double* brow = gb.data() + l * n;
                    for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
            accumulate_grad(*b, gb, gm);
        }
    });
}

// y = x W^T + b over the last axis; W is [Dout, Din], bias may be null.
inline Var linear(const Var& x, const Var& weight, const Var& bias = nullptr) {
    if (weight->value.rank() != 2) throw DimensionError("linear: weight must be rank 2 [Dout,Din]");
    const int64_t din = weight->value.dim(1);
    const int64_t dout = weight->value.dim(0);
    if (x->value.rank() < 1 || x->value.dim(x->value.rank() - 1) != din)
        throw DimensionError("linear: last axis of x (" +
                             std::to_string(x->value.rank() ? x->value.dim(x->value.rank() - 1) : 0) +
                             ") does not match Din=" + std::to_string(din));
    if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != dout))
        throw DimensionError("linear: bias axis must equal Dout=" + std::to_string(dout));
    const int64_t rows = x->value.numel() / din;
    Shape out_shape(x->value.shape());
    out_shape.back() = dout;
    Tensor out(out_shape);
    {
        const double* px = x->value.data();
        const double* pw = weight->value.data();
        const double* pbias = bias ? bias->value.data() : nullptr;
        double* po = out.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = px + r * din;
            double* orow = po + r * dout;
            for (int64_t o = 0; o < dout; ++o) {
                const double* wr = pw + o * din;
                double acc = pbias ? pbias[o] : 0.0;
                for (int64_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
                orow[o] = acc;
            }
        }
    }
    bool any = wants_grad(x) || wants_grad(weight) || (bias && wants_grad(bias));
    return make_op(std::move(out), any, [x, weight, bias, rows, din, dout](Node& self, GradMap& gm) {
        const double* g = self.grad.data();
        if (wants_grad(x)) {
            Tensor gx(x->value.shape());
            const double* pw = weight->value.data();
            for (int64_t r = 0; r < rows; ++r) {
                double* gxr = gx.data() + r * din;
                const double* grow = g + r * dout;
                for (int64_t o = 0; o < dout; ++o) {
                    double gv = grow[o];
                    if (gv == 0.0) continue;
                    const double* wr = pw + o * din;
                    for (int64_t i = 0; i < din; ++i) gxr[i] += gv * wr[i];
                }
            }
            accumulate_grad(*x, gx, gm);
        }
        if (wants_grad(weight)) {
            Tensor gw(Shape{dout, din});
            const double* px = x->value.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = px + r * din;
                const double* grow = g + r * dout;
                for (int64_t o = 0; o < dout; ++o) {
                    double gv = grow[o];
                    if (gv == 0.0) continue;
                    double* wr = gw.data() + o * din;
                    for (int64_t i = 0; i < din; ++i) wr[i] += gv * xr[i];
                }
            }
            accumulate_grad(*weight, gw, gm);
        }
        if (bias && wants_grad(bias)) {
            Tensor gb(Shape{dout});
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t o = 0; o < dout; ++o) gb[o] += g[r * dout + o];
            accumulate_grad(*bias, gb, gm);
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

// Cross-correlation (no kernel flip), zero padding.
// x: [N,Cin,H,W], kernel: [Cout,Cin/groups,kh,kw], bias: [Cout] or null.
inline Var conv2d(const Var& x, const Var& kernel, const Var& bias, int64_t stride, int64_t padding,
                  int64_t groups = 1) {
    const Tensor& xv = x->value;
    const Tensor& kv = kernel->value;
    if (xv.rank() != 4) throw DimensionError("conv2d: input must be [N,Cin,H,W], got " + shape_str(xv.shape()));
    if (kv.rank() != 4) throw DimensionError("conv2d: kernel must be [Cout,Cin/g,kh,kw], got " + shape_str(kv.shape()));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
    const int64_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int64_t cout = kv.dim(0), cpg = kv.dim(1), kh = kv.dim(2), kw = kv.dim(3);
    if (groups < 1 || cin % groups != 0)
        throw DimensionError("conv2d: Cin=" + std::to_string(cin) + " not divisible by groups=" + std::to_string(groups));
    if (cout % groups != 0)
        throw DimensionError("conv2d: Cout=" + std::to_string(cout) + " not divisible by groups=" + std::to_string(groups));
    if (cpg != cin / groups)
        throw DimensionError("conv2d: kernel channel axis is " + std::to_string(cpg) + ", expected Cin/groups=" +
                             std::to_string(cin / groups));
    if (kh > h + 2 * padding)
        throw DimensionError("conv2d: kernel height " + std::to_string(kh) + " exceeds padded input height " +
                             std::to_string(h + 2 * padding));
    if (kw > w + 2 * padding)
        throw DimensionError("conv2d: kernel width " + std::to_string(kw) + " exceeds padded input width " +
                             std::to_string(w + 2 * padding));
    if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != cout))
        throw DimensionError("conv2d: bias axis must equal Cout=" + std::to_string(cout));
    const int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const int64_t ow = (w + 2 * padding - kw) / stride + 1;
    const int64_t opg = cout / groups;

    Tensor out(Shape{n, cout, oh, ow});
    {
        const double* px = xv.data();
        const double* pk = kv.data();
        const double* pb = bias ? bias->value.data() : nullptr;
        double* po = out.data();
        if (kh == 1 && kw == 1 && stride == 1 && padding == 0) {
            // pointwise fast path
            const int64_t plane = h * w;
            for (int64_t b = 0; b < n; ++b)
                for (int64_t co = 0; co < cout; ++co) {
                    const int64_t g = co / opg;
                    double* orow = po + (b * cout + co) * plane;
                    if (pb) {
                        double bv = pb[co];
                        for (int64_t i = 0; i < plane; ++i) orow[i] = bv;
                    }
                    for (int64_t ic = 0; ic < cpg; ++ic) {
                        double kvv = pk[co * cpg + ic];
                        if (kvv == 0.0) continue;
                        const double* xrow = px + (b * cin + g * cpg + ic) * plane;
                        for (int64_t i = 0; i < plane; ++i) orow[i] += kvv * xrow[i];
                    }
                }
        } else {
            for (int64_t b = 0; b < n; ++b)
                for (int64_t co = 0; co < cout; ++co) {
                    const int64_t g = co / opg;
                    const double* kbase = pk + co * cpg * kh * kw;
                    for (int64_t y = 0; y < oh; ++y)
                        for (int64_t xo = 0; xo < ow; ++xo) {
                            double acc = bias ? pb[co] : 0.0;
                            const int64_t ih0 = y * stride - padding;
                            const int64_t iw0 = xo * stride - padding;
                            for (int64_t ic = 0; ic < cpg; ++ic) {
                                const double* xplane = px + (b * cin + g * cpg + ic) * h * w;
                                const double* kk = kbase + ic * kh * kw;
                                for (int64_t ky = 0; ky < kh; ++ky) {
                                    const int64_t ih = ih0 + ky;
                                    if (ih < 0 || ih >= h) continue;
                                    const double* xrow = xplane + ih * w;
                                    const double* krow = kk + ky * kw;
                                    for (int64_t kx = 0; kx < kw; ++kx) {
                                        const int64_t iw = iw0 + kx;
                                        if (iw < 0 || iw >= w) continue;
                                        acc += xrow[iw] * krow[kx];
                                    }
                                }
                            }
                            po[((b * cout + co) * oh + y) * ow + xo] = acc;
                        }
                }
        }
    }

    bool any = wants_grad(x) || wants_grad(kernel) || (bias && wants_grad(bias));
    return make_op(std::move(out), any,
                   [x, kernel, bias, stride, padding, groups, n, cin, h, w, cout, cpg, kh, kw, oh, ow,
                    opg](Node& self, GradMap& gm) {
        const double* g = self.grad.data();
        const double* px = x->value.data();
        const double* pk = kernel->value.data();
        const bool want_x = wants_grad(x);
        const bool want_k = wants_grad(kernel);
        Tensor gx = want_x ? Tensor(x->value.shape()) : Tensor();
        Tensor gk = want_k ? Tensor(kernel->value.shape()) : Tensor();
        if (want_x || want_k) {
            if (kh == 1 && kw == 1 && stride == 1 && padding == 0) {
                const int64_t plane = h * w;
                for (int64_t b = 0; b < n; ++b)
                    for (int64_t co = 0; co < cout; ++co) {
                        const int64_t gr = co / opg;
                        const double* grow = g + (b * cout + co) * plane;
                        for (int64_t ic = 0; ic < cpg; ++ic) {
                            const int64_t xi = (b * cin + gr * cpg + ic) * plane;
                            if (want_x) {
                                double kvv = pk[co * cpg + ic];
                                if (kvv != 0.0) {
                                    double* gxrow = gx.data() + xi;
                                    for (int64_t i = 0; i < plane; ++i) gxrow[i] += kvv * grow[i];
                                }
                            }
                            if (want_k) {
                                const double* xrow = px + xi;
                                double acc = 0.0;
                                for (int64_t i = 0; i < plane; ++i) acc += xrow[i] * grow[i];
                                gk[co * cpg + ic] += acc;
                            }
                        }
                    }
            } else {
                for (int64_t b = 0; b < n; ++b)
                    for (int64_t co = 0; co < cout; ++co) {
                        const int64_t gr = co / opg;
                        const double* kbase = pk + co * cpg * kh * kw;
                        double* gkbase = want_k ? gk.data() + co * cpg * kh * kw : nullptr;
                        for (int64_t y = 0; y < oh; ++y)
                            for (int64_t xo = 0; xo < ow; ++xo) {
                                const double gv = g[((b * cout + co) * oh + y) * ow + xo];
                                if (gv == 0.0) continue;
                                const int64_t ih0 = y * stride - padding;
                                const int64_t iw0 = xo * stride - padding;
                                for (int64_t ic = 0; ic < cpg; ++ic) {
                                    const int64_t xi = (b * cin + gr * cpg + ic) * h * w;
                                    for (int64_t ky = 0; ky < kh; ++ky) {
                                        const int64_t ih = ih0 + ky;
                                        if (ih < 0 || ih >= h) continue;
                                        for (int64_t kx = 0; kx < kw; ++kx) {
                                            const int64_t iw = iw0 + kx;
                                            if (iw < 0 || iw >= w) continue;
                                            if (want_x)
                                                gx[xi + ih * w + iw] += gv * kbase[(ic * kh + ky) * kw + kx];
                                            if (want_k)
                                                gkbase[(ic * kh + ky) * kw + kx] += gv * px[xi + ih * w + iw];
                                        }
                                    }
                                }
                            }
                    }
            }
        }
        if (want_x) accumulate_grad(*x, gx, gm);
        if (want_k) accumulate_grad(*kernel, gk, gm);
        if (bias && wants_grad(bias)) {
            Tensor gb(Shape{cout});
            for (int64_t b = 0; b < n; ++b)
                for (int64_t co = 0; co < cout; ++co) {
                    const double* grow = g + (b * cout + co) * oh * ow;
                    double acc = 0.0;
                    for (int64_t i = 0; i < oh * ow; ++i) acc += grow[i];
                    gb[co] += acc;
                }
            accumulate_grad(*bias, gb, gm);
        }
    });
}

inline Var conv2d(const Var& x, const Var& kernel, int64_t stride, int64_t padding, int64_t groups = 1) {
    return conv2d(x, kernel, nullptr, stride, padding, groups);
}

// ---------------------------------------------------------------------------
// layer_norm / softmax
// ---------------------------------------------------------------------------

// Normalizes the last axis to zero mean / unit variance (biased estimator),
// then applies the affine gamma/beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Tensor& xv = x->value;
    if (xv.rank() < 1) throw DimensionError("layer_norm: input must have at least one axis");
    const int64_t c = xv.dim(xv.rank() - 1);
    if (c < 1) throw DimensionError("layer_norm: last axis must be >= 1");
    if (eps <= 0) throw ContractError("layer_norm: eps must be > 0");
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw DimensionError("layer_norm: gamma/beta must have C=" + std::to_string(c) + " elements");
    const int64_t rows = xv.numel() / c;

    Tensor out(xv.shape());
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_std = std::make_shared<Tensor>(Shape{rows});
    {
        const double* px = xv.data();
        const double* pg = gamma->value.data();
        const double* pb = beta->value.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = px + r * c;
            double mu = 0.0;
            for (int64_t i = 0; i < c; ++i) mu += xr[i];
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (int64_t i = 0; i < c; ++i) {
                double d = xr[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(c);
            double inv = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = inv;
            double* hr = xhat->data() + r * c;
            double* orow = out.data() + r * c;
            for (int64_t i = 0; i < c; ++i) {
                double xh = (xr[i] - mu) * inv;
                hr[i] = xh;
                orow[i] = pg[i] * xh + pb[i];
            }
        }
    }
    bool any = wants_grad(x) || wants_grad(gamma) || wants_grad(beta);
    return make_op(std::move(out), any, [x, gamma, beta, xhat, inv_std, rows, c](Node& self, GradMap& gm) {
        const double* g = self.grad.data();
        const double* pg = gamma->value.data();
        if (wants_grad(x)) {
            Tensor gx(x->value.shape());
            for (int64_t r = 0; r < rows; ++r) {
                const double* grow = g + r * c;
                const double* hr = xhat->data() + r * c;
                double m1 = 0.0, m2 = 0.0;
                for (int64_t i = 0; i < c; ++i) {
                    double gh = grow[i] * pg[i];
                    m1 += gh;
                    m2 += gh * hr[i];
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                double inv = (*inv_std)[r];
                double* gxr = gx.data() + r * c;
                for (int64_t i = 0; i < c; ++i) {
                    double gh = grow[i] * pg[i];
                    gxr[i] = (gh - m1 - hr[i] * m2) * inv;
                }
            }
            accumulate_grad(*x, gx, gm);
        }
        if (wants_grad(gamma)) {
            Tensor gg(Shape{c});
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < c; ++i) gg[i] += g[r * c + i] * (*xhat)[r * c + i];
            accumulate_grad(*gamma, gg, gm);
        }
        if (wants_grad(beta)) {
            Tensor gb(Shape{c});
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < c; ++i) gb[i] += g[r * c + i];
            accumulate_grad(*beta, gb, gm);
        }
    });
}

// Max-subtracted softmax along `axis`.
inline Var softmax(const Var& x, int64_t axis) {
    const Tensor& xv = x->value;
    if (axis < 0) axis += xv.rank();
    if (axis < 0 || axis >= xv.rank()) throw DimensionError("softmax: axis out of range");
    const int64_t k = xv.dim(axis);
    int64_t inner = 1;
    for (int64_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
    const int64_t outer = xv.numel() / (k * inner);

    Tensor out(xv.shape());
    {
        const double* px = xv.data();
        double* po = out.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * k * inner + in;
                double mx = px[base];
                for (int64_t j = 1; j < k; ++j) mx = std::max(mx, px[base + j * inner]);
                double z = 0.0;
                for (int64_t j = 0; j < k; ++j) {
                    double e = std::exp(px[base + j * inner] - mx);
                    po[base + j * inner] = e;
                    z += e;
                }
                double invz = 1.0 / z;
                for (int64_t j = 0; j < k; ++j) po[base + j * inner] *= invz;
            }
    }
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), wants_grad(x), [x, saved, k, inner, outer](Node& self, GradMap& gm) {
        Tensor gx(x->value.shape());
        const double* g = self.grad.data();
        const double* y = saved->data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * k * inner + in;
                double dot = 0.0;
                for (int64_t j = 0; j < k; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t idx = base + j * inner;
                    gx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        accumulate_grad(*x, gx, gm);
    });
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

// out[i] = x[index[i]] where `index` is a bijection between the flat output
// and flat input; backward scatters adjoints through the inverse.
inline Var reindex(const Var& x, Shape out_shape, std::shared_ptr<const std::vector<int64_t>> index) {
    if (static_cast<int64_t>(index->size()) != numel_of(out_shape))
        throw DimensionError("reindex: index length does not match output shape");
    Tensor out(std::move(out_shape));
    const double* px = x->value.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = px[(*index)[static_cast<size_t>(i)]];
    return make_op(std::move(out), wants_grad(x), [x, index](Node& self, GradMap& gm) {
        Tensor gx(x->value.shape());
        for (int64_t i = 0; i < self.grad.numel(); ++i) gx[(*index)[static_cast<size_t>(i)]] += self.grad[i];
        accumulate_grad(*x, gx, gm);
    });
}

inline Var reshape(const Var& x, Shape s) {
    Tensor out = x->value.reshaped(s);
    return make_op(std::move(out), wants_grad(x), [x](Node& self, GradMap& gm) {
        accumulate_grad(*x, self.grad.reshaped(x->value.shape()), gm);
    });
}

inline std::shared_ptr<const std::vector<int64_t>> permute_index(const Shape& in_shape,
                                                                 const std::vector<int64_t>& axes,
                                                                 Shape& out_shape) {
    const int64_t r = static_cast<int64_t>(in_shape.size());
    if (static_cast<int64_t>(axes.size()) != r) throw DimensionError("permute: axes rank mismatch");
    Shape in_strides(in_shape.size());
    {
        int64_t acc = 1;
        for (int64_t i = r - 1; i >= 0; --i) {
            in_strides[static_cast<size_t>(i)] = acc;
            acc *= in_shape[static_cast<size_t>(i)];
        }
    }
    out_shape.resize(in_shape.size());
    for (int64_t i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(numel_of(out_shape)));
    std::vector<int64_t> counter(in_shape.size(), 0);
    const int64_t total = numel_of(out_shape);
    for (int64_t flat = 0; flat < total; ++flat) {
        int64_t src = 0;
        for (int64_t i = 0; i < r; ++i)
            src += counter[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
        (*idx)[static_cast<size_t>(flat)] = src;
        for (int64_t i = r - 1; i >= 0; --i) {
            if (++counter[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            counter[static_cast<size_t>(i)] = 0;
        }
    }
    return idx;
}

inline Var permute(const Var& x, const std::vector<int64_t>& axes) {
    Shape out_shape;
    auto idx = permute_index(x->value.shape(), axes, out_shape);
    return reindex(x, std::move(out_shape), idx);
}

// p_t lookup: out[h,w] = probs[labels[h,w], h, w]
inline Var gather_class(const Var& probs, const std::vector<int>& labels, int64_t h, int64_t w) {
    const Tensor& pv = probs->value;
    if (pv.rank() != 3 || pv.dim(1) != h || pv.dim(2) != w)
        throw DimensionError("gather_class: probs must be [K," + std::to_string(h) + "," + std::to_string(w) + "]");
    const int64_t k = pv.dim(0);
    if (static_cast<int64_t>(labels.size()) != h * w) throw DimensionError("gather_class: label count mismatch");
    Tensor out(Shape{h, w});
    for (int64_t i = 0; i < h * w; ++i) {
        int lab = labels[static_cast<size_t>(i)];
        if (lab < 0 || lab >= k)
            throw ContractError("gather_class: label " + std::to_string(lab) + " outside [0," + std::to_string(k) + ")");
        out[i] = pv[lab * h * w + i];
    }
    return make_op(std::move(out), wants_grad(probs), [probs, labels, h, w](Node& self, GradMap& gm) {
        Tensor gp(probs->value.shape());
        for (int64_t i = 0; i < h * w; ++i) gp[labels[static_cast<size_t>(i)] * h * w + i] += self.grad[i];
        accumulate_grad(*probs, gp, gm);
    });
}

// ---------------------------------------------------------------------------
// fused S6 recurrence
// ---------------------------------------------------------------------------

// Per channel d with state size N and h_0 = 0:
//   abar_t = exp(delta_t[d] * A[d,:])            (elementwise over n)
//   h_t    = abar_t (.) h_{t-1} + delta_t[d] * B_t * x_t[d]
//   y_t[d] = <C_t, h_t> + D_skip[d] * x_t[d]
// x,delta: [L,D]; B,C: [L,N]; A: [D,N]; d_skip: [D] -> y: [L,D]
inline Var s6_recurrence(const Var& x, const Var& delta, const Var& b_seq, const Var& c_seq, const Var& a,
                         const Var& d_skip) {
    const Tensor& xv = x->value;
    if (xv.rank() != 2) throw DimensionError("s6_recurrence: x must be [L,D]");
    const int64_t l = xv.dim(0), d = xv.dim(1);
    if (delta->value.shape() != xv.shape()) throw DimensionError("s6_recurrence: delta must match x shape");
    if (b_seq->value.rank() != 2 || b_seq->value.dim(0) != l) throw DimensionError("s6_recurrence: B must be [L,N]");
    const int64_t n = b_seq->value.dim(1);
    if (c_seq->value.shape() != b_seq->value.shape()) throw DimensionError("s6_recurrence: C must be [L,N]");
    if (a->value.rank() != 2 || a->value.dim(0) != d || a->value.dim(1) != n)
        throw DimensionError("s6_recurrence: A must be [D,N]");
    if (d_skip->value.numel() != d) throw DimensionError("s6_recurrence: D_skip must be [D]");
    for (const Var* v : {&x, &delta, &b_seq, &c_seq, &a, &d_skip})
        if (!(*v)->value.all_finite()) throw NumericError("s6_recurrence: non-finite operand");

    auto h_saved = std::make_shared<Tensor>(Shape{l, d, n});
    auto abar_saved = std::make_shared<Tensor>(Shape{l, d, n});
    Tensor y(Shape{l, d});
    {
        const double* px = xv.data();
        const double* pdel = delta->value.data();
        const double* pb = b_seq->value.data();
        const double* pc = c_seq->value.data();
        const double* pa = a->value.data();
        const double* pd = d_skip->value.data();
        double* ph = h_saved->data();
        double* pab = abar_saved->data();
        for (int64_t t = 0; t < l; ++t) {
            const double* brow = pb + t * n;
            const double* crow = pc + t * n;
            for (int64_t ch = 0; ch < d; ++ch) {
                const double dt = pdel[t * d + ch];
                const double xt = px[t * d + ch];
                const double* arow = pa + ch * n;
                const double* hprev = t > 0 ? ph + ((t - 1) * d + ch) * n : nullptr;
                double* hrow = ph + (t * d + ch) * n;
                double* abrow = pab + (t * d + ch) * n;
                double acc = 0.0;
                const double dx = dt * xt;
                for (int64_t j = 0; j < n; ++j) {
                    const double ab = std::exp(dt * arow[j]);
                    abrow[j] = ab;
                    const double hv = (hprev ? ab * hprev[j] : 0.0) + dx * brow[j];
                    hrow[j] = hv;
                    acc += crow[j] * hv;
                }
                y[t * d + ch] = acc + pd[ch] * xt;
            }
        }
    }
    bool any = wants_grad(x) || wants_grad(delta) || wants_grad(b_seq) || wants_grad(c_seq) || wants_grad(a) ||
               wants_grad(d_skip);
    return make_op(std::move(y), any,
                   [x, delta, b_seq, c_seq, a, d_skip, h_saved, abar_saved, l, d, n](Node& self, GradMap& gm) {
        const double* g = self.grad.data();
        const double* px = x->value.data();
        const double* pdel = delta->value.data();
        const double* pb = b_seq->value.data();
        const double* pc = c_seq->value.data();
        const double* pa = a->value.data();
        const double* pd = d_skip->value.data();
        const double* ph = h_saved->data();
        const double* pab = abar_saved->data();
        Tensor gx(Shape{l, d}), gdelta(Shape{l, d}), gb(Shape{l, n}), gc(Shape{l, n}), ga(Shape{d, n}),
            gd(Shape{d});
        std::vector<double> hcarry(static_cast<size_t>(d * n), 0.0);
        for (int64_t t = l - 1; t >= 0; --t) {
            const double* brow = pb + t * n;
            const double* crow = pc + t * n;
            double* gbrow = gb.data() + t * n;
            double* gcrow = gc.data() + t * n;
            for (int64_t ch = 0; ch < d; ++ch) {
                const double gy = g[t * d + ch];
                const double dt = pdel[t * d + ch];
                const double xt = px[t * d + ch];
                const double* arow = pa + ch * n;
                const double* hrow = ph + (t * d + ch) * n;
                const double* hprev = t > 0 ? ph + ((t - 1) * d + ch) * n : nullptr;
                const double* abrow = pab + (t * d + ch) * n;
                double* carry = hcarry.data() + ch * n;
                double* garow = ga.data() + ch * n;
                double gx_acc = gy * pd[ch];
                double gdt = 0.0;
                gd[ch] += gy * xt;
                for (int64_t j = 0; j < n; ++j) {
                    gcrow[j] += gy * hrow[j];
                    const double ghat = gy * crow[j] + carry[j];
                    const double hp = hprev ? hprev[j] : 0.0;
                    const double ab = abrow[j];
                    garow[j] += ghat * hp * dt * ab;
                    gdt += ghat * hp * arow[j] * ab;
                    gdt += ghat * brow[j] * xt;
                    gbrow[j] += ghat * dt * xt;
                    gx_acc += ghat * dt * brow[j];
                    carry[j] = ghat * ab;
                }
                gx[t * d + ch] += gx_acc;
                gdelta[t * d + ch] += gdt;
            }
        }
        if (wants_grad(x)) accumulate_grad(*x, gx, gm);
        if (wants_grad(delta)) accumulate_grad(*delta, gdelta, gm);
        if (wants_grad(b_seq)) accumulate_grad(*b_seq, gb, gm);
        if (wants_grad(c_seq)) accumulate_grad(*c_seq, gc, gm);
        if (wants_grad(a)) accumulate_grad(*a, ga, gm);
        if (wants_grad(d_skip)) accumulate_grad(*d_skip, gd, gm);
    });
}

}  // namespace osd
