// leosat - LEO satellite IoT downlink simulation and learning toolkit
// Copyright (C) 2026 the leosat authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#include "leosat/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace leosat::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

int64_t shape_size(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
        n *= d;
    }
    return n;
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) throw std::invalid_argument(std::string("shape mismatch in ") + op);
}

bool want_grad(std::initializer_list<TensorPtr> ins) {
    if (!tape().recording) return false;
    for (const auto& t : ins)
        if (t->requires_grad) return true;
    return false;
}

TensorPtr make_out(std::vector<int> shape, bool rg) {
    auto t = std::make_shared<Tensor>(std::move(shape), rg);
    return t;
}

}  // namespace

Tensor::Tensor(std::vector<int> s, bool rg) : shape(std::move(s)), requires_grad(rg) {
    data.assign(size_t(shape_size(shape)), 0.0);
}

int64_t Tensor::size() const { return int64_t(data.size()); }

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

TensorPtr tensor(std::vector<int> shape, bool requires_grad) {
    return make_out(std::move(shape), requires_grad);
}

TensorPtr tensor_of(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    auto t = make_out(std::move(shape), requires_grad);
    if (int64_t(values.size()) != t->size())
        throw std::invalid_argument("tensor_of: value count does not match shape");
    t->data = std::move(values);
    return t;
}

TensorPtr scalar(double v, bool requires_grad) {
    auto t = make_out({1}, requires_grad);
    t->data[0] = v;
    return t;
}

Tape& tape() {
    thread_local Tape t;
    return t;
}

void backward(const TensorPtr& root) {
    if (root->size() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!std::isfinite(root->data[0])) throw std::runtime_error("backward: non-finite loss");
    root->ensure_grad();
    root->grad[0] = 1.0;
    auto& tp = tape();
    for (auto it = tp.steps.rbegin(); it != tp.steps.rend(); ++it) (*it)();
    tp.clear();
}

// ---------------------------------------------------------------- elementwise

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "add");
    bool rg = want_grad({a, b});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (rg) tape().record([a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] += out->grad[i];
        }
    });
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "sub");
    bool rg = want_grad({a, b});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (rg) tape().record([a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] -= out->grad[i];
        }
    });
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "mul");
    bool rg = want_grad({a, b});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (rg) tape().record([a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
        }
    });
    return out;
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "div");
    bool rg = want_grad({a, b});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] / b->data[i];
    if (rg) tape().record([a, b, out] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i] / b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < b->grad.size(); ++i)
                b->grad[i] -= out->grad[i] * a->data[i] / (b->data[i] * b->data[i]);
        }
    });
    return out;
}

TensorPtr add_scalar(const TensorPtr& a, double c) {
    bool rg = want_grad({a});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + c;
    if (rg) tape().record([a, out] {
        a->ensure_grad();
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
    });
    return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
    bool rg = want_grad({a});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * c;
    if (rg) tape().record([a, out, c] {
        a->ensure_grad();
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i] * c;
    });
    return out;
}

TensorPtr neg(const TensorPtr& a) { return scale(a, -1.0); }

namespace {

template <typename F, typename DF>
TensorPtr unary_op(const TensorPtr& a, F f, DF dfdx_from_out) {
    bool rg = want_grad({a});
    auto out = make_out(a->shape, rg);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = f(a->data[i]);
    if (rg) tape().record([a, out, dfdx_from_out] {
        a->ensure_grad();
        for (size_t i = 0; i < a->grad.size(); ++i)
            a->grad[i] += out->grad[i] * dfdx_from_out(a->data[i], out->data[i]);
    });
    return out;
}

}  // namespace

TensorPtr sigmoid(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

TensorPtr tanh_op(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

TensorPtr relu(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

TensorPtr exp_op(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

TensorPtr log_op(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

TensorPtr sqrt_op(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

TensorPtr square(const TensorPtr& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------- reductions

TensorPtr sum_all(const TensorPtr& a) {
    bool rg = want_grad({a});
    auto out = make_out({1}, rg);
    out->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
    if (rg) tape().record([a, out] {
        a->ensure_grad();
        double g = out->grad[0];
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    });
    return out;
}

TensorPtr mean_all(const TensorPtr& a) {
    return scale(sum_all(a), 1.0 / double(a->size()));
}

TensorPtr sum_rows(const TensorPtr& a) {
    if (a->ndim() != 2) throw std::invalid_argument("sum_rows expects a 2-D tensor");
    int n = a->dim(0), c = a->dim(1);
    bool rg = want_grad({a});
    auto out = make_out({n, 1}, rg);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += a->data[size_t(i) * c + j];
        out->data[size_t(i)] = s;
    }
    if (rg) tape().record([a, out, n, c] {
        a->ensure_grad();
        for (int i = 0; i < n; ++i) {
            double g = out->grad[size_t(i)];
            for (int j = 0; j < c; ++j) a->grad[size_t(i) * c + j] += g;
        }
    });
    return out;
}

// ------------------------------------------------------------- linear algebra

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(1) != b->dim(0))
        throw std::invalid_argument("matmul: incompatible shapes");
    int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    bool rg = want_grad({a, b});
    auto out = make_out({m, n}, rg);
    {
        CMatMap A(a->data.data(), m, k), B(b->data.data(), k, n);
        MatMap C(out->data.data(), m, n);
        C.noalias() = A * B;
    }
    if (rg) tape().record([a, b, out, m, k, n] {
        CMatMap A(a->data.data(), m, k), B(b->data.data(), k, n), G(out->grad.data(), m, n);
        if (a->requires_grad) {
            a->ensure_grad();
            MatMap dA(a->grad.data(), m, k);
            dA.noalias() += G * B.transpose();
        }
        if (b->requires_grad) {
            b->ensure_grad();
            MatMap dB(b->grad.data(), k, n);
            dB.noalias() += A.transpose() * G;
        }
    });
    return out;
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (x->ndim() != 2 || w->ndim() != 2 || x->dim(1) != w->dim(1))
        throw std::invalid_argument("linear: incompatible shapes");
    int batch = x->dim(0), in = x->dim(1), out_dim = w->dim(0);
    if (b->size() != out_dim) throw std::invalid_argument("linear: bad bias length");
    bool rg = want_grad({x, w, b});
    auto out = make_out({batch, out_dim}, rg);
    {
        CMatMap X(x->data.data(), batch, in), W(w->data.data(), out_dim, in);
        MatMap Y(out->data.data(), batch, out_dim);
        Y.noalias() = X * W.transpose();
        for (int i = 0; i < batch; ++i)
            for (int o = 0; o < out_dim; ++o) out->data[size_t(i) * out_dim + o] += b->data[size_t(o)];
    }
    if (rg) tape().record([x, w, b, out, batch, in, out_dim] {
        CMatMap X(x->data.data(), batch, in), W(w->data.data(), out_dim, in),
            G(out->grad.data(), batch, out_dim);
        if (x->requires_grad) {
            x->ensure_grad();
            MatMap dX(x->grad.data(), batch, in);
            dX.noalias() += G * W;
        }
        if (w->requires_grad) {
            w->ensure_grad();
            MatMap dW(w->grad.data(), out_dim, in);
            dW.noalias() += G.transpose() * X;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < batch; ++i)
                for (int o = 0; o < out_dim; ++o) b->grad[size_t(o)] += out->grad[size_t(i) * out_dim + o];
        }
    });
    return out;
}

TensorPtr transpose2d(const TensorPtr& a) {
    if (a->ndim() != 2) throw std::invalid_argument("transpose2d expects a 2-D tensor");
    int m = a->dim(0), n = a->dim(1);
    bool rg = want_grad({a});
    auto out = make_out({n, m}, rg);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[size_t(j) * m + i] = a->data[size_t(i) * n + j];
    if (rg) tape().record([a, out, m, n] {
        a->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) a->grad[size_t(i) * n + j] += out->grad[size_t(j) * m + i];
    });
    return out;
}

// --------------------------------------------------------------------- layout

TensorPtr reshape(const TensorPtr& a, std::vector<int> shape) {
    if (shape_size(shape) != a->size()) throw std::invalid_argument("reshape: element count mismatch");
    bool rg = want_grad({a});
    auto out = make_out(std::move(shape), rg);
    out->data = a->data;
    if (rg) tape().record([a, out] {
        a->ensure_grad();
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
    });
    return out;
}

TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(0) != b->dim(0))
        throw std::invalid_argument("concat_cols: row mismatch");
    int rows = a->dim(0), ca = a->dim(1), cb = b->dim(1);
    bool rg = want_grad({a, b});
    auto out = make_out({rows, ca + cb}, rg);
    for (int i = 0; i < rows; ++i) {
        std::copy_n(&a->data[size_t(i) * ca], ca, &out->data[size_t(i) * (ca + cb)]);
        std::copy_n(&b->data[size_t(i) * cb], cb, &out->data[size_t(i) * (ca + cb) + ca]);
    }
    if (rg) tape().record([a, b, out, rows, ca, cb] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < ca; ++j)
                    a->grad[size_t(i) * ca + j] += out->grad[size_t(i) * (ca + cb) + j];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cb; ++j)
                    b->grad[size_t(i) * cb + j] += out->grad[size_t(i) * (ca + cb) + ca + j];
        }
    });
    return out;
}

TensorPtr slice_cols(const TensorPtr& a, int c0, int n) {
    if (a->ndim() != 2 || c0 < 0 || n <= 0 || c0 + n > a->dim(1))
        throw std::invalid_argument("slice_cols: range out of bounds");
    int rows = a->dim(0), cols = a->dim(1);
    bool rg = want_grad({a});
    auto out = make_out({rows, n}, rg);
    for (int i = 0; i < rows; ++i)
        std::copy_n(&a->data[size_t(i) * cols + c0], n, &out->data[size_t(i) * n]);
    if (rg) tape().record([a, out, rows, cols, c0, n] {
        a->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < n; ++j)
                a->grad[size_t(i) * cols + c0 + j] += out->grad[size_t(i) * n + j];
    });
    return out;
}

TensorPtr slice_rows(const TensorPtr& a, int r0, int n) {
    if (a->ndim() != 2 || r0 < 0 || n <= 0 || r0 + n > a->dim(0))
        throw std::invalid_argument("slice_rows: range out of bounds");
    int cols = a->dim(1);
    bool rg = want_grad({a});
    auto out = make_out({n, cols}, rg);
    std::copy_n(&a->data[size_t(r0) * cols], size_t(n) * cols, out->data.data());
    if (rg) tape().record([a, out, r0, n, cols] {
        a->ensure_grad();
        for (size_t i = 0; i < size_t(n) * cols; ++i)
            a->grad[size_t(r0) * cols + i] += out->grad[i];
    });
    return out;
}

TensorPtr select_time(const TensorPtr& a, int t) {
    if (a->ndim() != 3 || t < 0 || t >= a->dim(1))
        throw std::invalid_argument("select_time: bad index");
    int batch = a->dim(0), steps = a->dim(1), f = a->dim(2);
    bool rg = want_grad({a});
    auto out = make_out({batch, f}, rg);
    for (int i = 0; i < batch; ++i)
        std::copy_n(&a->data[(size_t(i) * steps + t) * f], f, &out->data[size_t(i) * f]);
    if (rg) tape().record([a, out, batch, steps, f, t] {
        a->ensure_grad();
        for (int i = 0; i < batch; ++i)
            for (int j = 0; j < f; ++j)
                a->grad[(size_t(i) * steps + t) * f + j] += out->grad[size_t(i) * f + j];
    });
    return out;
}

TensorPtr stack_time(const std::vector<TensorPtr>& steps) {
    if (steps.empty()) throw std::invalid_argument("stack_time: empty input");
    int batch = steps[0]->dim(0), f = steps[0]->dim(1);
    int n = int(steps.size());
    bool rg = false;
    for (const auto& s : steps) {
        if (s->ndim() != 2 || s->dim(0) != batch || s->dim(1) != f)
            throw std::invalid_argument("stack_time: step shape mismatch");
        rg = rg || want_grad({s});
    }
    auto out = make_out({batch, n, f}, rg);
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < batch; ++i)
            std::copy_n(&steps[size_t(t)]->data[size_t(i) * f], f,
                        &out->data[(size_t(i) * n + t) * f]);
    if (rg) {
        auto ins = steps;
        tape().record([ins, out, batch, n, f] {
            for (int t = 0; t < n; ++t) {
                const auto& s = ins[size_t(t)];
                if (!s->requires_grad) continue;
                s->ensure_grad();
                for (int i = 0; i < batch; ++i)
                    for (int j = 0; j < f; ++j)
                        s->grad[size_t(i) * f + j] += out->grad[(size_t(i) * n + t) * f + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------- structured layers

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 int stride_h, int stride_w) {
    if (x->ndim() != 4 || w->ndim() != 4) throw std::invalid_argument("conv2d: need 4-D tensors");
    int batch = x->dim(0), cin = x->dim(1), h = x->dim(2), wd = x->dim(3);
    int f = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    if (w->dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
    if (kh > h || kw > wd) throw std::invalid_argument("conv2d: kernel larger than input");
    if (b->size() != f) throw std::invalid_argument("conv2d: bad bias length");
    if (stride_h < 1 || stride_w < 1) throw std::invalid_argument("conv2d: bad stride");
    int oh = (h - kh) / stride_h + 1, ow = (wd - kw) / stride_w + 1;
    bool rg = want_grad({x, w, b});
    auto out = make_out({batch, f, oh, ow}, rg);

    auto xat = [&](int bi, int c, int i, int j) -> const double& {
        return x->data[((size_t(bi) * cin + c) * h + i) * wd + j];
    };
    auto wat = [&](int fi, int c, int i, int j) -> const double& {
        return w->data[((size_t(fi) * cin + c) * kh + i) * kw + j];
    };
    for (int bi = 0; bi < batch; ++bi)
        for (int fi = 0; fi < f; ++fi)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double acc = b->data[size_t(fi)];
                    for (int c = 0; c < cin; ++c)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj)
                                acc += xat(bi, c, i * stride_h + ki, j * stride_w + kj) *
                                       wat(fi, c, ki, kj);
                    out->data[((size_t(bi) * f + fi) * oh + i) * ow + j] = acc;
                }

    if (rg) tape().record([x, w, b, out, batch, cin, h, wd, f, kh, kw, oh, ow, stride_h, stride_w] {
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        for (int bi = 0; bi < batch; ++bi)
            for (int fi = 0; fi < f; ++fi)
                for (int i = 0; i < oh; ++i)
                    for (int j = 0; j < ow; ++j) {
                        double g = out->grad[((size_t(bi) * f + fi) * oh + i) * ow + j];
                        if (g == 0.0) continue;
                        if (b->requires_grad) b->grad[size_t(fi)] += g;
                        for (int c = 0; c < cin; ++c)
                            for (int ki = 0; ki < kh; ++ki)
                                for (int kj = 0; kj < kw; ++kj) {
                                    size_t xi = ((size_t(bi) * cin + c) * h + i * stride_h + ki) * wd +
                                                j * stride_w + kj;
                                    size_t wi = ((size_t(fi) * cin + c) * kh + ki) * kw + kj;
                                    if (w->requires_grad) w->grad[wi] += g * x->data[xi];
                                    if (x->requires_grad) x->grad[xi] += g * w->data[wi];
                                }
                    }
    });
    return out;
}

TensorPtr maxpool2d(const TensorPtr& x, int ph, int pw) {
    if (x->ndim() != 4) throw std::invalid_argument("maxpool2d: need 4-D tensor");
    if (ph < 1 || pw < 1) throw std::invalid_argument("maxpool2d: bad window");
    int batch = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    int oh = h / ph, ow = w / pw;
    if (oh < 1 || ow < 1) throw std::invalid_argument("maxpool2d: window larger than input");
    bool rg = want_grad({x});
    auto out = make_out({batch, c, oh, ow}, rg);
    auto argmax = std::make_shared<std::vector<size_t>>(out->data.size());
    for (int bi = 0; bi < batch; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    size_t best = 0;
                    double bv = -HUGE_VAL;
                    for (int ki = 0; ki < ph; ++ki)
                        for (int kj = 0; kj < pw; ++kj) {
                            size_t xi = ((size_t(bi) * c + ci) * h + i * ph + ki) * w + j * pw + kj;
                            if (x->data[xi] > bv) {
                                bv = x->data[xi];
                                best = xi;
                            }
                        }
                    size_t oi = ((size_t(bi) * c + ci) * oh + i) * ow + j;
                    out->data[oi] = bv;
                    (*argmax)[oi] = best;
                }
    if (rg) tape().record([x, out, argmax] {
        x->ensure_grad();
        for (size_t oi = 0; oi < out->grad.size(); ++oi) x->grad[(*argmax)[oi]] += out->grad[oi];
    });
    return out;
}

TensorPtr dropout(const TensorPtr& x, double rate, bool training, Rng* rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;  // evaluation mode is the identity map
    if (rng == nullptr) throw std::invalid_argument("dropout: rng required in training mode");
    bool rg = want_grad({x});
    auto out = make_out(x->shape, rg);
    auto mask = std::make_shared<std::vector<double>>(x->data.size());
    double keep_scale = 1.0 / (1.0 - rate);
    for (size_t i = 0; i < x->data.size(); ++i) {
        (*mask)[i] = (rng->uniform() >= rate) ? keep_scale : 0.0;
        out->data[i] = x->data[i] * (*mask)[i];
    }
    if (rg) tape().record([x, out, mask] {
        x->ensure_grad();
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[i] * (*mask)[i];
    });
    return out;
}

TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                    std::vector<double>& running_mean, std::vector<double>& running_var,
                    double momentum, double eps, bool training) {
    if (x->ndim() != 2) throw std::invalid_argument("batchnorm: need [B,F] tensor");
    int batch = x->dim(0), f = x->dim(1);
    if (gamma->size() != f || beta->size() != f || int(running_mean.size()) != f ||
        int(running_var.size()) != f)
        throw std::invalid_argument("batchnorm: parameter length mismatch");
    bool rg = want_grad({x, gamma, beta});
    auto out = make_out(x->shape, rg);
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto istd = std::make_shared<std::vector<double>>(size_t(f));

    if (training) {
        for (int j = 0; j < f; ++j) {
            double mu = 0.0;
            for (int i = 0; i < batch; ++i) mu += x->data[size_t(i) * f + j];
            mu /= batch;
            double var = 0.0;
            for (int i = 0; i < batch; ++i) {
                double d = x->data[size_t(i) * f + j] - mu;
                var += d * d;
            }
            var /= batch;
            (*istd)[size_t(j)] = 1.0 / std::sqrt(var + eps);
            running_mean[size_t(j)] = (1.0 - momentum) * running_mean[size_t(j)] + momentum * mu;
            running_var[size_t(j)] = (1.0 - momentum) * running_var[size_t(j)] + momentum * var;
            for (int i = 0; i < batch; ++i) {
                double xh = (x->data[size_t(i) * f + j] - mu) * (*istd)[size_t(j)];
                (*xhat)[size_t(i) * f + j] = xh;
                out->data[size_t(i) * f + j] = gamma->data[size_t(j)] * xh + beta->data[size_t(j)];
            }
        }
    } else {
        for (int j = 0; j < f; ++j) {
            (*istd)[size_t(j)] = 1.0 / std::sqrt(running_var[size_t(j)] + eps);
            for (int i = 0; i < batch; ++i) {
                double xh = (x->data[size_t(i) * f + j] - running_mean[size_t(j)]) * (*istd)[size_t(j)];
                (*xhat)[size_t(i) * f + j] = xh;
                out->data[size_t(i) * f + j] = gamma->data[size_t(j)] * xh + beta->data[size_t(j)];
            }
        }
    }

    if (rg) tape().record([x, gamma, beta, out, xhat, istd, batch, f, training] {
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int j = 0; j < f; ++j) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = 0; i < batch; ++i) {
                double dy = out->grad[size_t(i) * f + j];
                sum_dy += dy;
                sum_dy_xhat += dy * (*xhat)[size_t(i) * f + j];
            }
            if (gamma->requires_grad) gamma->grad[size_t(j)] += sum_dy_xhat;
            if (beta->requires_grad) beta->grad[size_t(j)] += sum_dy;
            if (x->requires_grad) {
                double g = gamma->data[size_t(j)] * (*istd)[size_t(j)];
                if (training) {
                    // Batch statistics depend on x; full normalization backward.
                    for (int i = 0; i < batch; ++i) {
                        double dy = out->grad[size_t(i) * f + j];
                        x->grad[size_t(i) * f + j] +=
                            g * (dy - sum_dy / batch -
                                 (*xhat)[size_t(i) * f + j] * sum_dy_xhat / batch);
                    }
                } else {
                    for (int i = 0; i < batch; ++i)
                        x->grad[size_t(i) * f + j] += g * out->grad[size_t(i) * f + j];
                }
            }
        }
    });
    return out;
}

TensorPtr power_normalize_rows(const TensorPtr& x, double total_power, int* zero_fallbacks) {
    if (x->ndim() != 2) throw std::invalid_argument("power_normalize_rows: need [B,N] tensor");
    if (total_power <= 0.0) throw std::invalid_argument("power_normalize_rows: power must be positive");
    int batch = x->dim(0), n = x->dim(1);
    double s = std::sqrt(total_power);
    bool rg = want_grad({x});
    auto out = make_out(x->shape, rg);
    auto norms = std::make_shared<std::vector<double>>(size_t(batch));
    double uniform_val = std::sqrt(total_power / double(n));
    for (int i = 0; i < batch; ++i) {
        double nn = 0.0;
        for (int j = 0; j < n; ++j) nn += x->data[size_t(i) * n + j] * x->data[size_t(i) * n + j];
        nn = std::sqrt(nn);
        (*norms)[size_t(i)] = nn;
        if (nn < 1e-300) {
            if (zero_fallbacks) ++*zero_fallbacks;
            for (int j = 0; j < n; ++j) out->data[size_t(i) * n + j] = uniform_val;
        } else {
            double c = s / nn;
            for (int j = 0; j < n; ++j) out->data[size_t(i) * n + j] = c * x->data[size_t(i) * n + j];
        }
    }
    if (rg) tape().record([x, out, norms, batch, n, s] {
        x->ensure_grad();
        for (int i = 0; i < batch; ++i) {
            double nn = (*norms)[size_t(i)];
            if (nn < 1e-300) continue;  // fallback row is locally constant
            double dot = 0.0;
            for (int j = 0; j < n; ++j)
                dot += out->grad[size_t(i) * n + j] * x->data[size_t(i) * n + j];
            dot /= (nn * nn);
            double c = s / nn;
            for (int j = 0; j < n; ++j)
                x->grad[size_t(i) * n + j] +=
                    c * (out->grad[size_t(i) * n + j] - x->data[size_t(i) * n + j] * dot);
        }
    });
    return out;
}

TensorPtr kth_value(const TensorPtr& x, int k, int frozen_index) {
    int64_t n = x->size();
    if (k < 0 || k >= n) throw std::invalid_argument("kth_value: k out of range");
    int sel;
    if (frozen_index >= 0) {
        if (frozen_index >= n) throw std::invalid_argument("kth_value: frozen index out of range");
        sel = frozen_index;
    } else {
        std::vector<int> idx(size_t(n));
        std::iota(idx.begin(), idx.end(), 0);
        std::nth_element(idx.begin(), idx.begin() + k, idx.end(), [&](int i, int j) {
            if (x->data[size_t(i)] != x->data[size_t(j)]) return x->data[size_t(i)] < x->data[size_t(j)];
            return i < j;  // stable ties for determinism
        });
        sel = idx[size_t(k)];
    }
    bool rg = want_grad({x});
    auto out = make_out({1}, rg);
    out->data[0] = x->data[size_t(sel)];
    if (rg) tape().record([x, out, sel] {
        x->ensure_grad();
        x->grad[size_t(sel)] += out->grad[0];
    });
    return out;
}

}  // namespace leosat::nn
