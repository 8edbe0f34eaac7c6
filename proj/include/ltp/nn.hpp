#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ltp/autodiff.hpp"
#include "ltp/common.hpp"

namespace ltp {

inline void init_he_normal(Tensor& t, int fan_in, Rng& rng) {
    double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = s * rng.normal();
}

inline void init_zero(Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
}

struct Dense {
    Parameter w, b;

    Dense() = default;
    Dense(const std::string& name, int in, int out, Rng& rng)
        : w(name + ".w", Tensor({out, in})), b(name + ".b", Tensor({1, out})) {
        init_he_normal(w.value, in, rng);
    }

    Var forward(Tape& t, Var x) { return linear(x, t.param(w), t.param(b)); }

    void zero_init() { init_zero(w.value); init_zero(b.value); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct Conv2d {
    Parameter w, b;
    int stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(const std::string& name, int in, int out, int k, int stride_, int pad_, Rng& rng)
        : w(name + ".w", Tensor({out, in, k, k})), b(name + ".b", Tensor({out})),
          stride(stride_), pad(pad_) {
        init_he_normal(w.value, in * k * k, rng);
    }

    Var forward(Tape& t, Var x) { return conv2d(x, t.param(w), t.param(b), stride, pad); }

    void zero_init() { init_zero(w.value); init_zero(b.value); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct ConvTranspose2d {
    Parameter w, b;
    int stride = 2, pad = 1;

    ConvTranspose2d() = default;
    ConvTranspose2d(const std::string& name, int in, int out, int k, int stride_, int pad_, Rng& rng)
        : w(name + ".w", Tensor({in, out, k, k})), b(name + ".b", Tensor({out})),
          stride(stride_), pad(pad_) {
        init_he_normal(w.value, in * k * k, rng);
    }

    Var forward(Tape& t, Var x) { return conv_transpose2d(x, t.param(w), t.param(b), stride, pad); }

    void zero_init() { init_zero(w.value); init_zero(b.value); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

// Per-row feature normalization with learnable scale/shift.
struct FeatureNorm {
    Parameter gamma, beta;

    FeatureNorm() = default;
    FeatureNorm(const std::string& name, int dim)
        : gamma(name + ".gamma", Tensor::full({1, dim}, 1.0)), beta(name + ".beta", Tensor({1, dim})) {}

    Var forward(Tape& t, Var x) { return feature_norm(x, t.param(gamma), t.param(beta)); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v
struct SgdOptimizer {
    double momentum = 0.9;

    void step(const std::vector<Parameter*>& params, double lr) const {
        for (Parameter* p : params) {
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                p->vel[i] = momentum * p->vel[i] + p->grad[i];
                p->value[i] -= lr * p->vel[i];
            }
        }
    }

    static void zero_grad(const std::vector<Parameter*>& params) {
        for (Parameter* p : params) p->zero_grad();
    }
};

}  // namespace ltp
