// Reverse-mode ops. Shape checks throw ContractError naming expected/actual.
//
// Lifetime note: ops suffixed _const that take a large const Tensor& (queue
// snapshots) capture a pointer; the caller must keep the tensor alive until
// backward() has run. Small constant operands are captured by value.

#include "ltp/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace ltp {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw ContractError(std::string(op) + ": shape mismatch " + a.val().shape_str() +
                            " vs " + b.val().shape_str());
}

void check_2d(const Var& a, const char* op) {
    if (a.val().dim() != 2)
        throw ContractError(std::string(op) + ": expected 2-d tensor, got " + a.val().shape_str());
}

}  // namespace

Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + b.val()[i];
    Node *na = a.node, *nb = b.node;
    bool ng = na->needs_grad || nb->needs_grad;
    return a.tape->make(std::move(out), ng, [na, nb](Node& self) {
        Tape::accumulate(na, self.grad);
        Tape::accumulate(nb, self.grad);
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
    Node *na = a.node, *nb = b.node;
    bool ng = na->needs_grad || nb->needs_grad;
    return a.tape->make(std::move(out), ng, [na, nb](Node& self) {
        Tape::accumulate(na, self.grad);
        if (nb->needs_grad) {
            Tensor g = Tensor::uninit(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = -self.grad[i];
            Tape::accumulate(nb, g);
        }
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    Node *na = a.node, *nb = b.node;
    bool ng = na->needs_grad || nb->needs_grad;
    return a.tape->make(std::move(out), ng, [na, nb](Node& self) {
        if (na->needs_grad) {
            Tensor g = Tensor::uninit(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * nb->val()[i];
            Tape::accumulate(na, g);
        }
        if (nb->needs_grad) {
            Tensor g = Tensor::uninit(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * na->val()[i];
            Tape::accumulate(nb, g);
        }
    });
}

Var scale(Var a, double c) {
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * c;
    Node* na = a.node;
    return a.tape->make(std::move(out), na->needs_grad, [na, c](Node& self) {
        Tensor g = Tensor::uninit(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * c;
        Tape::accumulate(na, g);
    });
}

Var relu(Var a) {
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] > 0.0 ? a.val()[i] : 0.0;
    Node* na = a.node;
    return a.tape->make(std::move(out), na->needs_grad, [na](Node& self) {
        Tensor g = Tensor::uninit(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = na->val()[i] > 0.0 ? self.grad[i] : 0.0;
        Tape::accumulate(na, g);
    });
}

Var exp_of(Var a) {
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a.val()[i]);
    Node* na = a.node;
    return a.tape->make(std::move(out), na->needs_grad, [na](Node& self) {
        Tensor g = Tensor::uninit(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * self.val()[i];
        Tape::accumulate(na, g);
    });
}

Var log_of(Var a) {
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a.val()[i]);
    Node* na = a.node;
    return a.tape->make(std::move(out), na->needs_grad, [na](Node& self) {
        Tensor g = Tensor::uninit(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] / na->val()[i];
        Tape::accumulate(na, g);
    });
}

Var stop_grad(Var a) {
    return a.tape->make(a.val(), false, nullptr);
}

Var mask_mul(Var a, const Tensor& mask) {
    if (!a.val().same_shape(mask))
        throw ContractError("mask_mul: shape mismatch " + a.val().shape_str() + " vs " + mask.shape_str());
    Tensor out = Tensor::uninit(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * mask[i];
    Node* na = a.node;
    Tensor m = mask;  // by value
    return a.tape->make(std::move(out), na->needs_grad, [na, m = std::move(m)](Node& self) {
        Tensor g = Tensor::uninit(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * m[i];
        Tape::accumulate(na, g);
    });
}

Var reshape(Var a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a.val().numel())
        throw ContractError("reshape: numel mismatch for " + a.val().shape_str());
    Tensor out = Tensor::uninit(std::move(shape));
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i];
    Node* na = a.node;
    return a.tape->make(std::move(out), na->needs_grad, [na](Node& self) {
        Tensor g = Tensor::uninit(na->val().shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i];
        Tape::accumulate(na, g);
    });
}

Var stack_rows(Tape& tape, std::span<const Var> rows) {
    if (rows.empty()) throw ContractError("stack_rows: no rows");
    int d = rows[0].val().size(1);
    int n = static_cast<int>(rows.size());
    Tensor out({n, d});
    bool ng = false;
    std::vector<Node*> parents(rows.size());
    for (int r = 0; r < n; ++r) {
        require_shape(rows[static_cast<size_t>(r)].val(), {1, d}, "stack_rows");
        const Tensor& v = rows[static_cast<size_t>(r)].val();
        for (int j = 0; j < d; ++j) out[static_cast<int64_t>(r) * d + j] = v[j];
        parents[static_cast<size_t>(r)] = rows[static_cast<size_t>(r)].node;
        ng = ng || parents[static_cast<size_t>(r)]->needs_grad;
    }
    return tape.make(std::move(out), ng, [parents = std::move(parents), d](Node& self) {
        for (size_t r = 0; r < parents.size(); ++r) {
            if (!parents[r]->needs_grad) continue;
            Tensor g({1, d});
            for (int j = 0; j < d; ++j) g[j] = self.grad[static_cast<int64_t>(r) * d + j];
            Tape::accumulate(parents[r], g);
        }
    });
}

Var linear(Var x, Var w, Var b) {
    check_2d(x, "linear");
    check_2d(w, "linear");
    int n = x.val().size(0), din = x.val().size(1), dout = w.val().size(0);
    if (w.val().size(1) != din)
        throw ContractError("linear: weight " + w.val().shape_str() + " does not match input " +
                            x.val().shape_str());
    require_shape(b.val(), {1, dout}, "linear bias");
    Tensor out = Tensor::uninit({n, dout});
    {
        CMapM X(x.val().data(), n, din), W(w.val().data(), dout, din);
        MapM Y(out.data(), n, dout);
        Y.noalias() = X * W.transpose();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < dout; ++j) out[static_cast<int64_t>(r) * dout + j] += b.val()[j];
    }
    Node *nx = x.node, *nw = w.node, *nb = b.node;
    bool ng = nx->needs_grad || nw->needs_grad || nb->needs_grad;
    return x.tape->make(std::move(out), ng, [nx, nw, nb, n, din, dout](Node& self) {
        CMapM dY(self.grad.data(), n, dout);
        if (nx->needs_grad) {
            Tensor g = Tensor::uninit({n, din});
            CMapM W(nw->val().data(), dout, din);
            MapM G(g.data(), n, din);
            G.noalias() = dY * W;
            Tape::accumulate(nx, g);
        }
        if (nw->needs_grad) {
            Tensor g = Tensor::uninit({dout, din});
            CMapM X(nx->val().data(), n, din);
            MapM G(g.data(), dout, din);
            G.noalias() = dY.transpose() * X;
            Tape::accumulate(nw, g);
        }
        if (nb->needs_grad) {
            Tensor g({1, dout});
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < dout; ++j) g[j] += self.grad[static_cast<int64_t>(r) * dout + j];
            Tape::accumulate(nb, g);
        }
    });
}

Var matmul_nt_const(Var a, const Tensor& b) {
    check_2d(a, "matmul_nt_const");
    int n = a.val().size(0), d = a.val().size(1), m = b.size(0);
    if (b.dim() != 2 || b.size(1) != d)
        throw ContractError("matmul_nt_const: operand " + b.shape_str() + " does not match " +
                            a.val().shape_str());
    Tensor out = m > 0 ? Tensor::uninit({n, m}) : Tensor({n, m});
    if (m > 0) {
        CMapM A(a.val().data(), n, d), B(b.data(), m, d);
        MapM Y(out.data(), n, m);
        Y.noalias() = A * B.transpose();
    }
    Node* na = a.node;
    const Tensor* bp = &b;  // caller keeps alive until backward
    return a.tape->make(std::move(out), na->needs_grad, [na, bp, n, d, m](Node& self) {
        if (m == 0) return;
        Tensor g = Tensor::uninit({n, d});
        CMapM dY(self.grad.data(), n, m), B(bp->data(), m, d);
        MapM G(g.data(), n, d);
        G.noalias() = dY * B;
        Tape::accumulate(na, g);
    });
}

Var row_dot(Var a, Var b) {
    check_same_shape(a, b, "row_dot");
    check_2d(a, "row_dot");
    int n = a.val().size(0), d = a.val().size(1);
    Tensor out({n, 1});
    for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int j = 0; j < d; ++j)
            s += a.val()[static_cast<int64_t>(r) * d + j] * b.val()[static_cast<int64_t>(r) * d + j];
        out[r] = s;
    }
    Node *na = a.node, *nb = b.node;
    bool ng = na->needs_grad || nb->needs_grad;
    return a.tape->make(std::move(out), ng, [na, nb, n, d](Node& self) {
        for (Node* tgt : {na, nb}) {
            Node* other = tgt == na ? nb : na;
            if (!tgt->needs_grad) continue;
            Tensor g({n, d});
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < d; ++j)
                    g[static_cast<int64_t>(r) * d + j] =
                        self.grad[r] * other->val()[static_cast<int64_t>(r) * d + j];
            Tape::accumulate(tgt, g);
        }
    });
}

Var row_dot_const(Var a, const Tensor& b) {
    if (!a.val().same_shape(b))
        throw ContractError("row_dot_const: shape mismatch " + a.val().shape_str() + " vs " + b.shape_str());
    check_2d(a, "row_dot_const");
    int n = a.val().size(0), d = a.val().size(1);
    Tensor out({n, 1});
    for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += a.val()[static_cast<int64_t>(r) * d + j] * b[static_cast<int64_t>(r) * d + j];
        out[r] = s;
    }
    Node* na = a.node;
    const Tensor* bp = &b;
    return a.tape->make(std::move(out), na->needs_grad, [na, bp, n, d](Node& self) {
        Tensor g({n, d});
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < d; ++j)
                g[static_cast<int64_t>(r) * d + j] = self.grad[r] * (*bp)[static_cast<int64_t>(r) * d + j];
        Tape::accumulate(na, g);
    });
}

Var sum_rows(Var a) {
    check_2d(a, "sum_rows");
    int n = a.val().size(0), k = a.val().size(1);
    Tensor out({n, 1});
    for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int j = 0; j < k; ++j) s += a.val()[static_cast<int64_t>(r) * k + j];
        out[r] = s;
    }
    Node* na = a.node;
    return a.tape->make(std::move(out), na->needs_grad, [na, n, k](Node& self) {
        if (k == 0) return;
        Tensor g({n, k});
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < k; ++j) g[static_cast<int64_t>(r) * k + j] = self.grad[r];
        Tape::accumulate(na, g);
    });
}

Var sub_colvec(Var x, Var c) {
    check_2d(x, "sub_colvec");
    int n = x.val().size(0), k = x.val().size(1);
    require_shape(c.val(), {n, 1}, "sub_colvec");
    Tensor out({n, k});
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < k; ++j)
            out[static_cast<int64_t>(r) * k + j] = x.val()[static_cast<int64_t>(r) * k + j] - c.val()[r];
    Node *nx = x.node, *nc = c.node;
    bool ng = nx->needs_grad || nc->needs_grad;
    return x.tape->make(std::move(out), ng, [nx, nc, n, k](Node& self) {
        Tape::accumulate(nx, self.grad);
        if (nc->needs_grad) {
            Tensor g({n, 1});
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < k; ++j) g[r] -= self.grad[static_cast<int64_t>(r) * k + j];
            Tape::accumulate(nc, g);
        }
    });
}

Var sub_colvec_const(Var x, const Tensor& c) {
    check_2d(x, "sub_colvec_const");
    int n = x.val().size(0), k = x.val().size(1);
    require_shape(c, {n, 1}, "sub_colvec_const");
    Tensor out({n, k});
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < k; ++j)
            out[static_cast<int64_t>(r) * k + j] = x.val()[static_cast<int64_t>(r) * k + j] - c[r];
    Node* nx = x.node;
    return x.tape->make(std::move(out), nx->needs_grad, [nx](Node& self) {
        Tape::accumulate(nx, self.grad);
    });
}

Var mean_all(Var a) {
    int64_t n = a.val().numel();
    if (n == 0) throw ContractError("mean_all of empty tensor");
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += a.val()[i];
    Node* na = a.node;
    return a.tape->make(Tensor::scalar(s / static_cast<double>(n)), na->needs_grad, [na, n](Node& self) {
        Tensor g(na->val().shape());
        double gs = self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) g[i] = gs;
        Tape::accumulate(na, g);
    });
}

Var sum_all(Var a) {
    int64_t n = a.val().numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) s += a.val()[i];
    Node* na = a.node;
    return a.tape->make(Tensor::scalar(s), na->needs_grad, [na, n](Node& self) {
        Tensor g(na->val().shape());
        for (int64_t i = 0; i < n; ++i) g[i] = self.grad[0];
        Tape::accumulate(na, g);
    });
}

Var feature_norm(Var x, Var gamma, Var beta, double eps) {
    check_2d(x, "feature_norm");
    int n = x.val().size(0), d = x.val().size(1);
    require_shape(gamma.val(), {1, d}, "feature_norm gamma");
    require_shape(beta.val(), {1, d}, "feature_norm beta");
    Tensor out({n, d});
    Tensor xhat({n, d});
    Tensor inv({n, 1});
    for (int r = 0; r < n; ++r) {
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += x.val()[static_cast<int64_t>(r) * d + j];
        mu /= d;
        double v = 0;
        for (int j = 0; j < d; ++j) {
            double c = x.val()[static_cast<int64_t>(r) * d + j] - mu;
            v += c * c;
        }
        v /= d;
        double iv = 1.0 / std::sqrt(v + eps);
        inv[r] = iv;
        for (int j = 0; j < d; ++j) {
            double h = (x.val()[static_cast<int64_t>(r) * d + j] - mu) * iv;
            xhat[static_cast<int64_t>(r) * d + j] = h;
            out[static_cast<int64_t>(r) * d + j] = gamma.val()[j] * h + beta.val()[j];
        }
    }
    Node *nx = x.node, *ng_ = gamma.node, *nb = beta.node;
    bool ng = nx->needs_grad || ng_->needs_grad || nb->needs_grad;
    return x.tape->make(std::move(out), ng,
                        [nx, ng_, nb, n, d, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
        if (nb->needs_grad) {
            Tensor g({1, d});
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < d; ++j) g[j] += self.grad[static_cast<int64_t>(r) * d + j];
            Tape::accumulate(nb, g);
        }
        if (ng_->needs_grad) {
            Tensor g({1, d});
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < d; ++j)
                    g[j] += self.grad[static_cast<int64_t>(r) * d + j] * xhat[static_cast<int64_t>(r) * d + j];
            Tape::accumulate(ng_, g);
        }
        if (nx->needs_grad) {
            Tensor g({n, d});
            for (int r = 0; r < n; ++r) {
                double mean_dh = 0, mean_dh_h = 0;
                for (int j = 0; j < d; ++j) {
                    double dh = self.grad[static_cast<int64_t>(r) * d + j] * ng_->val()[j];
                    mean_dh += dh;
                    mean_dh_h += dh * xhat[static_cast<int64_t>(r) * d + j];
                }
                mean_dh /= d;
                mean_dh_h /= d;
                for (int j = 0; j < d; ++j) {
                    double dh = self.grad[static_cast<int64_t>(r) * d + j] * ng_->val()[j];
                    g[static_cast<int64_t>(r) * d + j] =
                        inv[r] * (dh - mean_dh - xhat[static_cast<int64_t>(r) * d + j] * mean_dh_h);
                }
            }
            Tape::accumulate(nx, g);
        }
    });
}

Var l2_normalize_rows(Var x, double eps) {
    check_2d(x, "l2_normalize_rows");
    int n = x.val().size(0), d = x.val().size(1);
    Tensor out({n, d});
    Tensor norms({n, 1});
    for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int j = 0; j < d; ++j) {
            double v = x.val()[static_cast<int64_t>(r) * d + j];
            s += v * v;
        }
        double nr = std::max(std::sqrt(s), eps);
        norms[r] = nr;
        for (int j = 0; j < d; ++j) out[static_cast<int64_t>(r) * d + j] = x.val()[static_cast<int64_t>(r) * d + j] / nr;
    }
    Node* nx = x.node;
    return x.tape->make(std::move(out), nx->needs_grad, [nx, n, d, norms = std::move(norms)](Node& self) {
        Tensor g({n, d});
        for (int r = 0; r < n; ++r) {
            double ydy = 0;
            for (int j = 0; j < d; ++j) ydy += self.val()[static_cast<int64_t>(r) * d + j] * self.grad[static_cast<int64_t>(r) * d + j];
            for (int j = 0; j < d; ++j)
                g[static_cast<int64_t>(r) * d + j] =
                    (self.grad[static_cast<int64_t>(r) * d + j] - self.val()[static_cast<int64_t>(r) * d + j] * ydy) / norms[r];
        }
        Tape::accumulate(nx, g);
    });
}

// --- convolution ------------------------------------------------------------

namespace {

struct ConvGeom {
    int c, h, w, k, stride, pad, oh, ow;
};

// cols[(c*k*k + ky*k + kx), oy*ow + ox] = x[c, oy*s - p + ky, ox*s - p + kx]
Tensor im2col(const double* x, const ConvGeom& g) {
    Tensor cols = Tensor::uninit({g.c * g.k * g.k, g.oh * g.ow});
    double* cp = cols.data();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                int row = (c * g.k + ky) * g.k + kx;
                for (int oy = 0; oy < g.oh; ++oy) {
                    int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        int ix = ox * g.stride - g.pad + kx;
                        double v = 0.0;
                        if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                            v = x[(static_cast<int64_t>(c) * g.h + iy) * g.w + ix];
                        cp[static_cast<int64_t>(row) * (g.oh * g.ow) + oy * g.ow + ox] = v;
                    }
                }
            }
    return cols;
}

// scatter-add inverse of im2col
void col2im_add(const Tensor& cols, const ConvGeom& g, double* x) {
    const double* cp = cols.data();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                int row = (c * g.k + ky) * g.k + kx;
                for (int oy = 0; oy < g.oh; ++oy) {
                    int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.w) continue;
                        x[(static_cast<int64_t>(c) * g.h + iy) * g.w + ix] +=
                            cp[static_cast<int64_t>(row) * (g.oh * g.ow) + oy * g.ow + ox];
                    }
                }
            }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.dim() != 3) throw ContractError("conv2d: input must be CHW, got " + xv.shape_str());
    if (wv.dim() != 4) throw ContractError("conv2d: weight must be {Co,Ci,k,k}, got " + wv.shape_str());
    int ci = xv.size(0), h = xv.size(1), wd = xv.size(2);
    int co = wv.size(0), k = wv.size(2);
    if (wv.size(1) != ci)
        throw ContractError("conv2d: weight " + wv.shape_str() + " does not match input " + xv.shape_str());
    require_shape(b.val(), {co}, "conv2d bias");
    ConvGeom g{ci, h, wd, k, stride, pad, (h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1};
    if (g.oh <= 0 || g.ow <= 0)
        throw ContractError("conv2d: input " + xv.shape_str() + " too small for kernel");

    Tensor cols = im2col(xv.data(), g);
    Tensor out = Tensor::uninit({co, g.oh, g.ow});
    {
        CMapM W(wv.data(), co, ci * k * k), C(cols.data(), ci * k * k, g.oh * g.ow);
        MapM Y(out.data(), co, g.oh * g.ow);
        Y.noalias() = W * C;
        for (int c = 0; c < co; ++c)
            for (int i = 0; i < g.oh * g.ow; ++i) out[static_cast<int64_t>(c) * g.oh * g.ow + i] += b.val()[c];
    }
    Node *nx = x.node, *nw = w.node, *nb = b.node;
    bool ng = nx->needs_grad || nw->needs_grad || nb->needs_grad;
    return x.tape->make(std::move(out), ng,
                        [nx, nw, nb, g, co, cols = std::move(cols)](Node& self) {
        int spatial = g.oh * g.ow;
        int krows = g.c * g.k * g.k;
        CMapM dY(self.grad.data(), co, spatial);
        if (nb->needs_grad) {
            Tensor gb({co});
            for (int c = 0; c < co; ++c)
                for (int i = 0; i < spatial; ++i) gb[c] += self.grad[static_cast<int64_t>(c) * spatial + i];
            Tape::accumulate(nb, gb);
        }
        if (nw->needs_grad) {
            Tensor gw = Tensor::uninit({co, g.c, g.k, g.k});
            CMapM C(cols.data(), krows, spatial);
            MapM GW(gw.data(), co, krows);
            GW.noalias() = dY * C.transpose();
            Tape::accumulate(nw, gw);
        }
        if (nx->needs_grad) {
            Tensor dcols = Tensor::uninit({krows, spatial});
            CMapM W(nw->val().data(), co, krows);
            MapM DC(dcols.data(), krows, spatial);
            DC.noalias() = W.transpose() * dY;
            Tensor gx({g.c, g.h, g.w});
            col2im_add(dcols, g, gx.data());
            Tape::accumulate(nx, gx);
        }
    });
}

Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.dim() != 3) throw ContractError("conv_transpose2d: input must be CHW, got " + xv.shape_str());
    if (wv.dim() != 4) throw ContractError("conv_transpose2d: weight must be {Ci,Co,k,k}, got " + wv.shape_str());
    int ci = xv.size(0), h = xv.size(1), wd = xv.size(2);
    int co = wv.size(1), k = wv.size(2);
    if (wv.size(0) != ci)
        throw ContractError("conv_transpose2d: weight " + wv.shape_str() + " does not match input " + xv.shape_str());
    require_shape(b.val(), {co}, "conv_transpose2d bias");
    int oh = (h - 1) * stride - 2 * pad + k;
    int ow = (wd - 1) * stride - 2 * pad + k;
    if (oh <= 0 || ow <= 0) throw ContractError("conv_transpose2d: degenerate output size");
    // output plays the role of conv2d's input in the shared geometry
    ConvGeom g{co, oh, ow, k, stride, pad, h, wd};

    Tensor out({co, oh, ow});
    {
        Tensor cols = Tensor::uninit({co * k * k, h * wd});
        CMapM W(wv.data(), ci, co * k * k), X(xv.data(), ci, h * wd);
        MapM C(cols.data(), co * k * k, h * wd);
        C.noalias() = W.transpose() * X;
        col2im_add(cols, g, out.data());
        for (int c = 0; c < co; ++c)
            for (int i = 0; i < oh * ow; ++i) out[static_cast<int64_t>(c) * oh * ow + i] += b.val()[c];
    }
    Node *nx = x.node, *nw = w.node, *nb = b.node;
    bool ng = nx->needs_grad || nw->needs_grad || nb->needs_grad;
    return x.tape->make(std::move(out), ng, [nx, nw, nb, g, ci, co, h, wd, oh, ow, k](Node& self) {
        if (nb->needs_grad) {
            Tensor gb({co});
            for (int c = 0; c < co; ++c)
                for (int i = 0; i < oh * ow; ++i) gb[c] += self.grad[static_cast<int64_t>(c) * oh * ow + i];
            Tape::accumulate(nb, gb);
        }
        Tensor dcols = im2col(self.grad.data(), g);  // {co*k*k, h*wd}
        if (nx->needs_grad) {
            Tensor gx = Tensor::uninit({ci, h, wd});
            CMapM W(nw->val().data(), ci, co * k * k), DC(dcols.data(), co * k * k, h * wd);
            MapM GX(gx.data(), ci, h * wd);
            GX.noalias() = W * DC;
            Tape::accumulate(nx, gx);
        }
        if (nw->needs_grad) {
            Tensor gw = Tensor::uninit({ci, co, k, k});
            CMapM X(nx->val().data(), ci, h * wd), DC(dcols.data(), co * k * k, h * wd);
            MapM GW(gw.data(), ci, co * k * k);
            GW.noalias() = X * DC.transpose();
            Tape::accumulate(nw, gw);
        }
    });
}

// --- pooling ----------------------------------------------------------------

Var global_avg_pool(Var x) {
    const Tensor& xv = x.val();
    if (xv.dim() != 3) throw ContractError("global_avg_pool: input must be CHW, got " + xv.shape_str());
    int c = xv.size(0), h = xv.size(1), w = xv.size(2);
    int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({1, c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0;
        for (int64_t i = 0; i < hw; ++i) s += xv[ch * hw + i];
        out[ch] = s / static_cast<double>(hw);
    }
    Node* nx = x.node;
    return x.tape->make(std::move(out), nx->needs_grad, [nx, c, hw](Node& self) {
        Tensor g(nx->val().shape());
        for (int ch = 0; ch < c; ++ch) {
            double gs = self.grad[ch] / static_cast<double>(hw);
            for (int64_t i = 0; i < hw; ++i) g[ch * hw + i] = gs;
        }
        Tape::accumulate(nx, g);
    });
}

Var roi_avg_pool(Var x, double fx0, double fy0, double fx1, double fy1, int pool) {
    const Tensor& xv = x.val();
    if (xv.dim() != 3) throw ContractError("roi_avg_pool: input must be CHW, got " + xv.shape_str());
    int c = xv.size(0), h = xv.size(1), w = xv.size(2);
    // snap to whole cells, keep at least one
    int cx0 = std::clamp(static_cast<int>(std::floor(fx0)), 0, w - 1);
    int cy0 = std::clamp(static_cast<int>(std::floor(fy0)), 0, h - 1);
    int cx1 = std::clamp(static_cast<int>(std::ceil(fx1)), cx0 + 1, w);
    int cy1 = std::clamp(static_cast<int>(std::ceil(fy1)), cy0 + 1, h);
    int sw = cx1 - cx0, sh = cy1 - cy0;

    auto bin_lo = [](int base, int j, int span, int pool) { return base + (j * span) / pool; };
    auto bin_hi = [](int base, int j, int span, int pool) { return base + ((j + 1) * span + pool - 1) / pool; };

    Tensor out({1, c * pool * pool});
    for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < pool; ++py) {
            int y0 = bin_lo(cy0, py, sh, pool), y1 = std::max(bin_hi(cy0, py, sh, pool), y0 + 1);
            for (int px = 0; px < pool; ++px) {
                int x0 = bin_lo(cx0, px, sw, pool), x1 = std::max(bin_hi(cx0, px, sw, pool), x0 + 1);
                double s = 0;
                for (int iy = y0; iy < y1; ++iy)
                    for (int ix = x0; ix < x1; ++ix) s += xv[(static_cast<int64_t>(ch) * h + iy) * w + ix];
                out[(static_cast<int64_t>(ch) * pool + py) * pool + px] =
                    s / static_cast<double>((y1 - y0) * (x1 - x0));
            }
        }
    Node* nx = x.node;
    return x.tape->make(std::move(out), nx->needs_grad,
                        [nx, c, h, w, pool, cx0, cy0, sw, sh, bin_lo, bin_hi](Node& self) {
        Tensor g({c, h, w});
        for (int ch = 0; ch < c; ++ch)
            for (int py = 0; py < pool; ++py) {
                int y0 = bin_lo(cy0, py, sh, pool), y1 = std::max(bin_hi(cy0, py, sh, pool), y0 + 1);
                for (int px = 0; px < pool; ++px) {
                    int x0 = bin_lo(cx0, px, sw, pool), x1 = std::max(bin_hi(cx0, px, sw, pool), x0 + 1);
                    double gs = self.grad[(static_cast<int64_t>(ch) * pool + py) * pool + px] /
                                static_cast<double>((y1 - y0) * (x1 - x0));
                    for (int iy = y0; iy < y1; ++iy)
                        for (int ix = x0; ix < x1; ++ix) g[(static_cast<int64_t>(ch) * h + iy) * w + ix] += gs;
                }
            }
        Tape::accumulate(nx, g);
    });
}

// --- loss kernels -----------------------------------------------------------

Var smooth_l1_mean(Var x) {
    int64_t n = x.val().numel();
    if (n == 0) throw ContractError("smooth_l1_mean of empty tensor");
    double s = 0;
    for (int64_t i = 0; i < n; ++i) {
        double v = x.val()[i];
        s += std::abs(v) < 1.0 ? 0.5 * v * v : std::abs(v) - 0.5;
    }
    Node* nx = x.node;
    return x.tape->make(Tensor::scalar(s / static_cast<double>(n)), nx->needs_grad, [nx, n](Node& self) {
        Tensor g(nx->val().shape());
        double gs = self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            double v = nx->val()[i];
            g[i] = gs * std::clamp(v, -1.0, 1.0);
        }
        Tape::accumulate(nx, g);
    });
}

Var bce_logits_sum(Var logits, const Tensor& targets) {
    if (!logits.val().same_shape(targets))
        throw ContractError("bce_logits_sum: shape mismatch " + logits.val().shape_str() + " vs " +
                            targets.shape_str());
    int64_t n = logits.val().numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) {
        double z = logits.val()[i], y = targets[i];
        s += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Node* nx = logits.node;
    Tensor t = targets;
    return logits.tape->make(Tensor::scalar(s), nx->needs_grad, [nx, n, t = std::move(t)](Node& self) {
        Tensor g(nx->val().shape());
        for (int64_t i = 0; i < n; ++i) {
            double z = nx->val()[i];
            double sig = 1.0 / (1.0 + std::exp(-z));
            g[i] = self.grad[0] * (sig - t[i]);
        }
        Tape::accumulate(nx, g);
    });
}

Var softmax_ce_mean(Var logits, const std::vector<int>& labels) {
    check_2d(logits, "softmax_ce_mean");
    int n = logits.val().size(0), c = logits.val().size(1);
    if (static_cast<int>(labels.size()) != n)
        throw ContractError("softmax_ce_mean: label count does not match rows");
    Tensor probs({n, c});
    double total = 0;
    for (int r = 0; r < n; ++r) {
        double m = logits.val()[static_cast<int64_t>(r) * c];
        for (int j = 1; j < c; ++j) m = std::max(m, logits.val()[static_cast<int64_t>(r) * c + j]);
        double z = 0;
        for (int j = 0; j < c; ++j) {
            double e = std::exp(logits.val()[static_cast<int64_t>(r) * c + j] - m);
            probs[static_cast<int64_t>(r) * c + j] = e;
            z += e;
        }
        for (int j = 0; j < c; ++j) probs[static_cast<int64_t>(r) * c + j] /= z;
        total += m + std::log(z) - logits.val()[static_cast<int64_t>(r) * c + labels[static_cast<size_t>(r)]];
    }
    Node* nx = logits.node;
    return logits.tape->make(Tensor::scalar(total / n), nx->needs_grad,
                             [nx, n, c, labels, probs = std::move(probs)](Node& self) {
        Tensor g({n, c});
        double gs = self.grad[0] / n;
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < c; ++j)
                g[static_cast<int64_t>(r) * c + j] =
                    gs * (probs[static_cast<int64_t>(r) * c + j] -
                          (j == labels[static_cast<size_t>(r)] ? 1.0 : 0.0));
        Tape::accumulate(nx, g);
    });
}

}  // namespace ltp
