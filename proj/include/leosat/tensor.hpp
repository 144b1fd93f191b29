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

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "leosat/rng.hpp"

namespace leosat::nn {

// Dense row-major real tensor, 64-bit throughout. `grad` is allocated
// lazily and always matches `shape` once present.
class Tensor {
public:
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, bool rg = false);

    int64_t size() const;
    int dim(int i) const { return shape[size_t(i)]; }
    int ndim() const { return int(shape.size()); }

    void ensure_grad();
    void zero_grad();
    bool all_finite() const;
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr tensor(std::vector<int> shape, bool requires_grad = false);
TensorPtr tensor_of(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
TensorPtr scalar(double v, bool requires_grad = false);

// Define-by-run trace. Each op that touches a grad-requiring tensor pushes
// a backward closure; the trace is rebuilt on every forward pass.
class Tape {
public:
    bool recording = false;
    std::vector<std::function<void()>> steps;

    void record(std::function<void()> fn) { steps.push_back(std::move(fn)); }
    void clear() { steps.clear(); }
};

// One tape per thread; model instances must not share a thread while
// training (value-semantic tensors may move freely between threads).
Tape& tape();

// RAII switch for trace recording.
class GradMode {
public:
    explicit GradMode(bool on) : prev_(tape().recording) { tape().recording = on; }
    ~GradMode() { tape().recording = prev_; }

private:
    bool prev_;
};

// Reverse sweep from a finite scalar root; accumulates into `grad` of every
// reachable tensor with requires_grad, then clears the tape.
void backward(const TensorPtr& root);

// ---- elementwise / scalar ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_scalar(const TensorPtr& a, double c);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr neg(const TensorPtr& a);
TensorPtr sigmoid(const TensorPtr& a);
TensorPtr tanh_op(const TensorPtr& a);
TensorPtr relu(const TensorPtr& a);
TensorPtr exp_op(const TensorPtr& a);
TensorPtr log_op(const TensorPtr& a);
TensorPtr sqrt_op(const TensorPtr& a);
TensorPtr square(const TensorPtr& a);

// ---- reductions ----
TensorPtr sum_all(const TensorPtr& a);
TensorPtr mean_all(const TensorPtr& a);
TensorPtr sum_rows(const TensorPtr& a);  // [N,C] -> [N,1]

// ---- linear algebra ----
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);            // [m,k]x[k,n]
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);  // x[B,in], w[out,in] -> [B,out]
TensorPtr transpose2d(const TensorPtr& a);

// ---- layout ----
TensorPtr reshape(const TensorPtr& a, std::vector<int> shape);
TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b);       // [B,m]+[B,n] -> [B,m+n]
TensorPtr slice_cols(const TensorPtr& a, int c0, int n);             // [B,C] -> [B,n]
TensorPtr slice_rows(const TensorPtr& a, int r0, int n);             // [R,C] -> [n,C]
TensorPtr select_time(const TensorPtr& a, int t);                    // [B,T,F] -> [B,F]
TensorPtr stack_time(const std::vector<TensorPtr>& steps);           // T x [B,F] -> [B,T,F]

// ---- structured layers ----
// x [B,C,H,W], w [F,C,kh,kw], b [F]; valid cross-correlation.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                 int stride_h = 1, int stride_w = 1);
// Window (ph,pw) with matching stride; trailing remainder is dropped.
TensorPtr maxpool2d(const TensorPtr& x, int ph, int pw);
// Inverted dropout: train-time survivors scaled by 1/(1-rate); identity in eval.
TensorPtr dropout(const TensorPtr& x, double rate, bool training, Rng* rng);
// Per-feature batch norm over [B,F]; running stats updated in training mode.
TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                    std::vector<double>& running_mean, std::vector<double>& running_var,
                    double momentum, double eps, bool training);
// Row-wise rescale onto the total-power sphere: y = sqrt(p)*x/||x||.
// Zero rows fall back to a uniform vector of the same power (counted).
TensorPtr power_normalize_rows(const TensorPtr& x, double total_power,
                               int* zero_fallbacks = nullptr);
// k-th smallest entry (0-based k) of a vector-shaped tensor; gradient is
// routed to the selected element. frozen_index >= 0 bypasses the search.
TensorPtr kth_value(const TensorPtr& x, int k, int frozen_index = -1);

}  // namespace leosat::nn
