/* Copyright 2026 The FTFD Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ftfd/common.hpp"
#include "ftfd/tensor.hpp"

// Tensor operations. Every op takes an optional Tape*; when a tape is given
// and an input requires gradients, a backward step is recorded. Parallel
// kernels assign each output element to exactly one thread and keep its
// reduction order fixed, so results are bit-identical for any thread count.

namespace ftfd {

enum class Mode { kTrain, kEval };

namespace detail {

inline bool wants_grad(Tape* tape, const Tensor& t) {
  return tape != nullptr && t.requires_grad();
}

inline void require_rank(const Tensor& t, int rank, const char* op) {
  check_arg(t.defined() && t.rank() == rank,
            std::string(op) + ": expected rank " + std::to_string(rank) +
                " tensor, got " + (t.defined() ? t.shape_str() : "(undefined)"));
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  check_arg(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        a.shape_str() + " vs " + b.shape_str());
}

inline int ceil_div(int a, int b) {
  return a > 0 ? (a + b - 1) / b : a / b;
}

// Valid output range [lo, hi) along one spatial axis for kernel offset ko:
// positions o with 0 <= o*stride + ko - pad < in_extent.
inline void conv_span(int in_extent, int out_extent, int ko, int stride,
                      int pad, int* lo, int* hi) {
  *lo = std::max(0, ceil_div(pad - ko, stride));
  const int num = in_extent - 1 - ko + pad;
  *hi = num < 0 ? 0 : std::min(out_extent, num / stride + 1);
}

inline int conv_out_extent_checked(int in, int k, int stride, int pad) {
  const int out = (in + 2 * pad - k) / stride + 1;
  check_arg(out >= 1, "conv2d: non-positive output extent");
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding, square kernel.
// input [B,Cin,H,W] * weight [Cout,Cin,k,k] + bias [Cout] -> [B,Cout,H',W']
// ---------------------------------------------------------------------------

namespace detail {

inline void conv2d_forward_plane(const double* in, const double* w,
                                 double bias_v, double* out, int cin, int h,
                                 int w_in, int k, int stride, int pad, int ho,
                                 int wo) {
  std::fill(out, out + static_cast<std::int64_t>(ho) * wo, bias_v);
  for (int ic = 0; ic < cin; ++ic) {
    const double* in_c = in + static_cast<std::int64_t>(ic) * h * w_in;
    const double* w_c = w + static_cast<std::int64_t>(ic) * k * k;
    for (int ky = 0; ky < k; ++ky) {
      int oy_lo, oy_hi;
      conv_span(h, ho, ky, stride, pad, &oy_lo, &oy_hi);
      for (int kx = 0; kx < k; ++kx) {
        const double wv = w_c[ky * k + kx];
        int ox_lo, ox_hi;
        conv_span(w_in, wo, kx, stride, pad, &ox_lo, &ox_hi);
        for (int oy = oy_lo; oy < oy_hi; ++oy) {
          const double* in_row =
              in_c + static_cast<std::int64_t>(oy * stride + ky - pad) * w_in +
              (kx - pad);
          double* out_row = out + static_cast<std::int64_t>(oy) * wo;
          if (stride == 1) {
            for (int ox = ox_lo; ox < ox_hi; ++ox) {
              out_row[ox] += wv * in_row[ox];
            }
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) {
              out_row[ox] += wv * in_row[ox * stride];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight,
                     const Tensor& bias, int stride, int padding) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  detail::require_rank(bias, 1, "conv2d bias");
  detail::check_arg(stride >= 1, "conv2d: stride must be >= 1");
  detail::check_arg(padding >= 0, "conv2d: padding must be >= 0");
  const int b = input.dim(0), cin = input.dim(1), h = input.dim(2),
            w_in = input.dim(3);
  const int cout = weight.dim(0), k = weight.dim(2);
  detail::check_arg(weight.dim(1) == cin,
                    "conv2d: weight expects " + std::to_string(weight.dim(1)) +
                        " input channels but input has " + std::to_string(cin));
  detail::check_arg(weight.dim(2) == weight.dim(3),
                    "conv2d: kernel must be square, got " + weight.shape_str());
  detail::check_arg(bias.dim(0) == cout,
                    "conv2d: bias size " + std::to_string(bias.dim(0)) +
                        " != output channels " + std::to_string(cout));
  detail::check_arg(k <= h + 2 * padding && k <= w_in + 2 * padding,
                    "conv2d: kernel " + std::to_string(k) +
                        " exceeds padded input " + input.shape_str());
  const int ho = detail::conv_out_extent_checked(h, k, stride, padding);
  const int wo = detail::conv_out_extent_checked(w_in, k, stride, padding);

  Tensor out({b, cout, ho, wo});
  {
    const double* in_p = input.data();
    const double* w_p = weight.data();
    const double* b_p = bias.data();
    double* out_p = out.data();
    parallel_for(static_cast<std::int64_t>(b) * cout, [&](std::int64_t idx) {
      const int bi = static_cast<int>(idx / cout);
      const int oc = static_cast<int>(idx % cout);
      detail::conv2d_forward_plane(
          in_p + static_cast<std::int64_t>(bi) * cin * h * w_in,
          w_p + static_cast<std::int64_t>(oc) * cin * k * k, b_p[oc],
          out_p + idx * ho * wo, cin, h, w_in, k, stride, padding, ho, wo);
    });
  }

  if (tape && (input.requires_grad() || weight.requires_grad() ||
               bias.requires_grad())) {
    out.set_requires_grad(true);
    Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
    tape->record([in_t, w_t, b_t, out_t, stride, padding]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const int b = in_t.dim(0), cin = in_t.dim(1), h = in_t.dim(2),
                w_in = in_t.dim(3);
      const int cout = w_t.dim(0), k = w_t.dim(2);
      const int ho = out_t.dim(2), wo = out_t.dim(3);

      if (in_t.requires_grad()) {
        double* din = in_t.ensure_grad();
        const double* w_p = w_t.data();
        parallel_for(static_cast<std::int64_t>(b) * cin, [&](std::int64_t idx) {
          const int bi = static_cast<int>(idx / cin);
          const int ic = static_cast<int>(idx % cin);
          double* din_c = din + idx * h * w_in;
          for (int oc = 0; oc < cout; ++oc) {
            const double* g_c =
                g + (static_cast<std::int64_t>(bi) * cout + oc) * ho * wo;
            const double* w_c =
                w_p + (static_cast<std::int64_t>(oc) * cin + ic) * k * k;
            for (int ky = 0; ky < k; ++ky) {
              int oy_lo, oy_hi;
              detail::conv_span(h, ho, ky, stride, padding, &oy_lo, &oy_hi);
              for (int kx = 0; kx < k; ++kx) {
                const double wv = w_c[ky * k + kx];
                int ox_lo, ox_hi;
                detail::conv_span(w_in, wo, kx, stride, padding, &ox_lo,
                                  &ox_hi);
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  double* din_row =
                      din_c +
                      static_cast<std::int64_t>(oy * stride + ky - padding) *
                          w_in +
                      (kx - padding);
                  const double* g_row = g_c + static_cast<std::int64_t>(oy) * wo;
                  if (stride == 1) {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) {
                      din_row[ox] += wv * g_row[ox];
                    }
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) {
                      din_row[ox * stride] += wv * g_row[ox];
                    }
                  }
                }
              }
            }
          }
        });
      }

      if (w_t.requires_grad()) {
        double* dw = w_t.ensure_grad();
        const double* in_p = in_t.data();
        parallel_for(static_cast<std::int64_t>(cout) * cin,
                     [&](std::int64_t idx) {
          const int oc = static_cast<int>(idx / cin);
          const int ic = static_cast<int>(idx % cin);
          double* dw_c = dw + idx * k * k;
          for (int ky = 0; ky < k; ++ky) {
            int oy_lo, oy_hi;
            detail::conv_span(h, ho, ky, stride, padding, &oy_lo, &oy_hi);
            for (int kx = 0; kx < k; ++kx) {
              int ox_lo, ox_hi;
              detail::conv_span(w_in, wo, kx, stride, padding, &ox_lo, &ox_hi);
              double acc = 0.0;
              for (int bi = 0; bi < b; ++bi) {
                const double* in_c =
                    in_p + (static_cast<std::int64_t>(bi) * cin + ic) * h * w_in;
                const double* g_c =
                    g + (static_cast<std::int64_t>(bi) * cout + oc) * ho * wo;
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  const double* in_row =
                      in_c +
                      static_cast<std::int64_t>(oy * stride + ky - padding) *
                          w_in +
                      (kx - padding);
                  const double* g_row =
                      g_c + static_cast<std::int64_t>(oy) * wo;
                  if (stride == 1) {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) {
                      acc += g_row[ox] * in_row[ox];
                    }
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) {
                      acc += g_row[ox] * in_row[ox * stride];
                    }
                  }
                }
              }
              dw_c[ky * k + kx] += acc;
            }
          }
        });
      }

      if (b_t.requires_grad()) {
        double* db = b_t.ensure_grad();
        parallel_for(cout, [&](std::int64_t oc) {
          double acc = 0.0;
          for (int bi = 0; bi < b; ++bi) {
            const double* g_c =
                g + (static_cast<std::int64_t>(bi) * cout + oc) * ho * wo;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo;
                 ++i) {
              acc += g_c[i];
            }
          }
          db[oc] += acc;
        });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel pooling: [B,C,H,W] -> [B,1,H,W]
// ---------------------------------------------------------------------------

inline Tensor channel_avg_pool(Tape* tape, const Tensor& input) {
  detail::require_rank(input, 4, "channel_avg_pool");
  const int b = input.dim(0), c = input.dim(1);
  const std::int64_t plane =
      static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
  Tensor out({b, 1, input.dim(2), input.dim(3)});
  const double* in_p = input.data();
  double* out_p = out.data();
  const double inv_c = 1.0 / c;
  parallel_for(b, [&](std::int64_t bi) {
    const double* in_b = in_p + bi * c * plane;
    double* out_b = out_p + bi * plane;
    for (std::int64_t i = 0; i < plane; ++i) out_b[i] = in_b[i];
    for (int ic = 1; ic < c; ++ic) {
      const double* in_c = in_b + static_cast<std::int64_t>(ic) * plane;
      for (std::int64_t i = 0; i < plane; ++i) out_b[i] += in_c[i];
    }
    for (std::int64_t i = 0; i < plane; ++i) out_b[i] *= inv_c;
  });
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, c, plane]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      double* din = in_t.ensure_grad();
      const double inv_c = 1.0 / c;
      const int b = in_t.dim(0);
      parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t idx) {
        const std::int64_t bi = idx / c;
        double* din_c = din + idx * plane;
        const double* g_b = g + bi * plane;
        for (std::int64_t i = 0; i < plane; ++i) din_c[i] += g_b[i] * inv_c;
      });
    });
  }
  return out;
}

inline Tensor channel_max_pool(Tape* tape, const Tensor& input) {
  detail::require_rank(input, 4, "channel_max_pool");
  const int b = input.dim(0), c = input.dim(1);
  const std::int64_t plane =
      static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
  Tensor out({b, 1, input.dim(2), input.dim(3)});
  // argmax per output position; ties resolve to the lowest channel index.
  auto argmax = std::make_shared<std::vector<int>>(
      static_cast<std::size_t>(b) * plane, 0);
  const double* in_p = input.data();
  double* out_p = out.data();
  int* am = argmax->data();
  parallel_for(b, [&](std::int64_t bi) {
    const double* in_b = in_p + bi * c * plane;
    double* out_b = out_p + bi * plane;
    int* am_b = am + bi * plane;
    for (std::int64_t i = 0; i < plane; ++i) out_b[i] = in_b[i];
    for (int ic = 1; ic < c; ++ic) {
      const double* in_c = in_b + static_cast<std::int64_t>(ic) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        if (in_c[i] > out_b[i]) {
          out_b[i] = in_c[i];
          am_b[i] = ic;
        }
      }
    }
  });
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, argmax, plane]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      double* din = in_t.ensure_grad();
      const int b = in_t.dim(0);
      const int* am = argmax->data();
      parallel_for(b, [&](std::int64_t bi) {
        const std::int64_t c = in_t.dim(1);
        double* din_b = din + bi * c * plane;
        const double* g_b = g + bi * plane;
        const int* am_b = am + bi * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          din_b[static_cast<std::int64_t>(am_b[i]) * plane + i] += g_b[i];
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat_channels: [B,Ca,H,W] ++ [B,Cb,H,W] -> [B,Ca+Cb,H,W]
// ---------------------------------------------------------------------------

inline Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 4, "concat_channels");
  detail::require_rank(b, 4, "concat_channels");
  detail::check_arg(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                        a.dim(3) == b.dim(3),
                    "concat_channels: batch/spatial mismatch " + a.shape_str() +
                        " vs " + b.shape_str());
  const int bt = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  Tensor out({bt, ca + cb, a.dim(2), a.dim(3)});
  double* out_p = out.data();
  const double* a_p = a.data();
  const double* b_p = b.data();
  for (int bi = 0; bi < bt; ++bi) {
    std::copy(a_p + static_cast<std::int64_t>(bi) * ca * plane,
              a_p + static_cast<std::int64_t>(bi + 1) * ca * plane,
              out_p + static_cast<std::int64_t>(bi) * (ca + cb) * plane);
    std::copy(b_p + static_cast<std::int64_t>(bi) * cb * plane,
              b_p + static_cast<std::int64_t>(bi + 1) * cb * plane,
              out_p + static_cast<std::int64_t>(bi) * (ca + cb) * plane +
                  ca * plane);
  }
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor a_t = a, b_t = b, out_t = out;
    tape->record([a_t, b_t, out_t, plane]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const int bt = a_t.dim(0), ca = a_t.dim(1), cb = b_t.dim(1);
      if (a_t.requires_grad()) {
        double* da = a_t.ensure_grad();
        for (int bi = 0; bi < bt; ++bi) {
          const double* g_b =
              g + static_cast<std::int64_t>(bi) * (ca + cb) * plane;
          double* da_b = da + static_cast<std::int64_t>(bi) * ca * plane;
          for (std::int64_t i = 0; i < ca * plane; ++i) da_b[i] += g_b[i];
        }
      }
      if (b_t.requires_grad()) {
        double* db = b_t.ensure_grad();
        for (int bi = 0; bi < bt; ++bi) {
          const double* g_b =
              g + static_cast<std::int64_t>(bi) * (ca + cb) * plane +
              ca * plane;
          double* db_b = db + static_cast<std::int64_t>(bi) * cb * plane;
          for (std::int64_t i = 0; i < cb * plane; ++i) db_b[i] += g_b[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

/// Numerically stable sigmoid. Outputs are clamped into the open interval
/// (0,1): the exponent is floored at -700 and the result capped below 1 by
/// one ulp, so extreme logits cannot produce exactly 0 or 1.
inline double sigmoid_value(double x) {
  static const double kBelowOne = std::nextafter(1.0, 0.0);
  if (x >= 0.0) {
    const double t = std::exp(-std::min(x, 700.0));
    const double y = 1.0 / (1.0 + t);
    return std::min(y, kBelowOne);
  }
  const double t = std::exp(std::max(x, -700.0));
  return t / (1.0 + t);
}

inline Tensor sigmoid(Tape* tape, const Tensor& input) {
  detail::check_arg(input.defined(), "sigmoid: undefined input");
  Tensor out(input.shape());
  const double* in_p = input.data();
  double* out_p = out.data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) out_p[i] = sigmoid_value(in_p[i]);
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const double* y = out_t.data();
      double* din = in_t.ensure_grad();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) din[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return out;
}

inline Tensor relu(Tape* tape, const Tensor& input) {
  detail::check_arg(input.defined(), "relu: undefined input");
  Tensor out(input.shape());
  const double* in_p = input.data();
  double* out_p = out.data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) out_p[i] = in_p[i] > 0.0 ? in_p[i] : 0.0;
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const double* x = in_t.data();
      double* din = in_t.ensure_grad();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) din[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// mul_broadcast: [B,C,H,W] * [B,1,H,W] -> [B,C,H,W]
// ---------------------------------------------------------------------------

inline Tensor mul_broadcast(Tape* tape, const Tensor& a, const Tensor& m) {
  detail::require_rank(a, 4, "mul_broadcast");
  detail::require_rank(m, 4, "mul_broadcast map");
  detail::check_arg(m.dim(1) == 1 && a.dim(0) == m.dim(0) &&
                        a.dim(2) == m.dim(2) && a.dim(3) == m.dim(3),
                    "mul_broadcast: map must be [B,1,H,W] matching input, got " +
                        a.shape_str() + " vs " + m.shape_str());
  const int b = a.dim(0), c = a.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  Tensor out(a.shape());
  const double* a_p = a.data();
  const double* m_p = m.data();
  double* out_p = out.data();
  parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t idx) {
    const std::int64_t bi = idx / c;
    const double* a_c = a_p + idx * plane;
    const double* m_b = m_p + bi * plane;
    double* o_c = out_p + idx * plane;
    for (std::int64_t i = 0; i < plane; ++i) o_c[i] = a_c[i] * m_b[i];
  });
  if (tape && (a.requires_grad() || m.requires_grad())) {
    out.set_requires_grad(true);
    Tensor a_t = a, m_t = m, out_t = out;
    tape->record([a_t, m_t, out_t, plane]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const int b = a_t.dim(0), c = a_t.dim(1);
      if (a_t.requires_grad()) {
        double* da = a_t.ensure_grad();
        const double* m_p = m_t.data();
        parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t idx) {
          const std::int64_t bi = idx / c;
          const double* g_c = g + idx * plane;
          const double* m_b = m_p + bi * plane;
          double* da_c = da + idx * plane;
          for (std::int64_t i = 0; i < plane; ++i) da_c[i] += g_c[i] * m_b[i];
        });
      }
      if (m_t.requires_grad()) {
        // Map gradient accumulates over the broadcast channel axis.
        double* dm = m_t.ensure_grad();
        const double* a_p = a_t.data();
        parallel_for(b, [&](std::int64_t bi) {
          double* dm_b = dm + bi * plane;
          for (int ic = 0; ic < c; ++ic) {
            const double* g_c = g + (bi * c + ic) * plane;
            const double* a_c = a_p + (bi * c + ic) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              dm_b[i] += g_c[i] * a_c[i];
            }
          }
        });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// fully_connected: [B,D] * [E,D]^T + [E] -> [B,E]
// ---------------------------------------------------------------------------

inline Tensor fully_connected(Tape* tape, const Tensor& input,
                              const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 2, "fully_connected input");
  detail::require_rank(weight, 2, "fully_connected weight");
  detail::require_rank(bias, 1, "fully_connected bias");
  const int b = input.dim(0), d = input.dim(1), e = weight.dim(0);
  detail::check_arg(weight.dim(1) == d,
                    "fully_connected: weight " + weight.shape_str() +
                        " does not match input " + input.shape_str());
  detail::check_arg(bias.dim(0) == e, "fully_connected: bias size " +
                                          std::to_string(bias.dim(0)) +
                                          " != " + std::to_string(e));
  Tensor out({b, e});
  const double* in_p = input.data();
  const double* w_p = weight.data();
  const double* b_p = bias.data();
  double* out_p = out.data();
  parallel_for(b, [&](std::int64_t bi) {
    const double* x = in_p + bi * d;
    double* o = out_p + bi * e;
    for (int ei = 0; ei < e; ++ei) {
      const double* w_row = w_p + static_cast<std::int64_t>(ei) * d;
      double acc = b_p[ei];
      for (int di = 0; di < d; ++di) acc += x[di] * w_row[di];
      o[ei] = acc;
    }
  });
  if (tape && (input.requires_grad() || weight.requires_grad() ||
               bias.requires_grad())) {
    out.set_requires_grad(true);
    Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
    tape->record([in_t, w_t, b_t, out_t]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const int b = in_t.dim(0), d = in_t.dim(1), e = w_t.dim(0);
      if (in_t.requires_grad()) {
        double* din = in_t.ensure_grad();
        const double* w_p = w_t.data();
        parallel_for(b, [&](std::int64_t bi) {
          double* dx = din + bi * d;
          const double* g_b = g + bi * e;
          for (int ei = 0; ei < e; ++ei) {
            const double gv = g_b[ei];
            const double* w_row = w_p + static_cast<std::int64_t>(ei) * d;
            for (int di = 0; di < d; ++di) dx[di] += gv * w_row[di];
          }
        });
      }
      if (w_t.requires_grad()) {
        double* dw = w_t.ensure_grad();
        const double* in_p = in_t.data();
        parallel_for(e, [&](std::int64_t ei) {
          double* dw_row = dw + ei * d;
          for (int bi = 0; bi < b; ++bi) {
            const double gv = g[static_cast<std::int64_t>(bi) * e + ei];
            const double* x = in_p + static_cast<std::int64_t>(bi) * d;
            for (int di = 0; di < d; ++di) dw_row[di] += gv * x[di];
          }
        });
      }
      if (b_t.requires_grad()) {
        double* db = b_t.ensure_grad();
        for (int ei = 0; ei < e; ++ei) {
          double acc = 0.0;
          for (int bi = 0; bi < b; ++bi) {
            acc += g[static_cast<std::int64_t>(bi) * e + ei];
          }
          db[ei] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// global_avg_pool: [B,C,H,W] -> [B,C]
// ---------------------------------------------------------------------------

inline Tensor global_avg_pool(Tape* tape, const Tensor& input) {
  detail::require_rank(input, 4, "global_avg_pool");
  const int b = input.dim(0), c = input.dim(1);
  const std::int64_t plane =
      static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
  Tensor out({b, c});
  const double* in_p = input.data();
  double* out_p = out.data();
  const double inv = 1.0 / static_cast<double>(plane);
  parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t idx) {
    const double* p = in_p + idx * plane;
    double acc = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
    out_p[idx] = acc * inv;
  });
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, plane, inv]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      double* din = in_t.ensure_grad();
      const std::int64_t bc =
          static_cast<std::int64_t>(in_t.dim(0)) * in_t.dim(1);
      parallel_for(bc, [&](std::int64_t idx) {
        const double gv = g[idx] * inv;
        double* p = din + idx * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += gv;
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// add: elementwise, same shape (residual shortcut)
// ---------------------------------------------------------------------------

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const double* a_p = a.data();
  const double* b_p = b.data();
  double* o = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = a_p[i] + b_p[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor a_t = a, b_t = b, out_t = out;
    tape->record([a_t, b_t, out_t]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const std::int64_t n = out_t.numel();
      if (a_t.requires_grad()) {
        double* da = a_t.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (b_t.requires_grad()) {
        double* db = b_t.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// sum and mul_scalar (scalar plumbing for losses and tests)
// ---------------------------------------------------------------------------

inline Tensor sum(Tape* tape, const Tensor& input) {
  detail::check_arg(input.defined(), "sum: undefined input");
  const double* p = input.data();
  double acc = 0.0;
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += p[i];
  Tensor out = Tensor::scalar(acc);
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t]() mutable {
      if (!out_t.has_grad()) return;
      const double gv = out_t.grad_data()[0];
      double* din = in_t.ensure_grad();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) din[i] += gv;
    });
  }
  return out;
}

inline Tensor mul_scalar(Tape* tape, const Tensor& input, double s) {
  detail::check_arg(input.defined(), "mul_scalar: undefined input");
  Tensor out(input.shape());
  const double* p = input.data();
  double* o = out.data();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = p[i] * s;
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, s]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      double* din = in_t.ensure_grad();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) din[i] += g[i] * s;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat_features: rank-2 tensors [B,Di] -> [B, sum(Di)]
// ---------------------------------------------------------------------------

inline Tensor concat_features(Tape* tape, const std::vector<Tensor>& parts) {
  detail::check_arg(!parts.empty(), "concat_features: no inputs");
  const int b = parts[0].dim(0);
  int total = 0;
  for (const Tensor& t : parts) {
    detail::require_rank(t, 2, "concat_features");
    detail::check_arg(t.dim(0) == b, "concat_features: batch mismatch " +
                                         t.shape_str());
    total += t.dim(1);
  }
  Tensor out({b, total});
  double* o = out.data();
  int off = 0;
  for (const Tensor& t : parts) {
    const int d = t.dim(1);
    const double* p = t.data();
    for (int bi = 0; bi < b; ++bi) {
      std::copy(p + static_cast<std::int64_t>(bi) * d,
                p + static_cast<std::int64_t>(bi + 1) * d,
                o + static_cast<std::int64_t>(bi) * total + off);
    }
    off += d;
  }
  bool any_grad = false;
  for (const Tensor& t : parts) any_grad |= t.requires_grad();
  if (tape && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> parts_t = parts;
    Tensor out_t = out;
    tape->record([parts_t, out_t, total]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const int b = out_t.dim(0);
      int off = 0;
      for (Tensor& t : parts_t) {
        const int d = t.dim(1);
        if (t.requires_grad()) {
          double* dt = t.ensure_grad();
          for (int bi = 0; bi < b; ++bi) {
            const double* g_row =
                g + static_cast<std::int64_t>(bi) * total + off;
            double* dt_row = dt + static_cast<std::int64_t>(bi) * d;
            for (int di = 0; di < d; ++di) dt_row[di] += g_row[di];
          }
        }
        off += d;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm over [B,C,H,W], per-channel affine, running statistics
// ---------------------------------------------------------------------------

/// Learnable scale/shift plus running statistics for one batch_norm site.
struct BatchNorm {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNorm create(int channels) {
    BatchNorm bn;
    bn.gamma = Tensor::full({channels}, 1.0, true);
    bn.beta = Tensor::zeros({channels}, true);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::full({channels}, 1.0);
    return bn;
  }
};

inline Tensor batch_norm(Tape* tape, const Tensor& input, BatchNorm& bn,
                         Mode mode) {
  detail::require_rank(input, 4, "batch_norm");
  const int b = input.dim(0), c = input.dim(1);
  detail::check_arg(bn.gamma.dim(0) == c && bn.beta.dim(0) == c,
                    "batch_norm: affine parameters sized " +
                        bn.gamma.shape_str() + " but input has " +
                        std::to_string(c) + " channels");
  const std::int64_t plane =
      static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
  const std::int64_t n_stat = static_cast<std::int64_t>(b) * plane;
  if (mode == Mode::kTrain) {
    detail::check_arg(n_stat >= 2,
                      "batch_norm: train mode needs B*H*W >= 2 per channel, "
                      "got " + std::to_string(n_stat));
  }

  auto mean = std::make_shared<std::vector<double>>(c, 0.0);
  auto invstd = std::make_shared<std::vector<double>>(c, 0.0);
  const double* in_p = input.data();

  if (mode == Mode::kTrain) {
    double* rm = bn.running_mean.data();
    double* rv = bn.running_var.data();
    const double mom = bn.momentum;
    const double eps = bn.eps;
    const double unbias =
        static_cast<double>(n_stat) / static_cast<double>(n_stat - 1);
    parallel_for(c, [&](std::int64_t ci) {
      double m = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const double* p = in_p + (static_cast<std::int64_t>(bi) * c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<double>(n_stat);
      double v = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const double* p = in_p + (static_cast<std::int64_t>(bi) * c + ci) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(n_stat);
      (*mean)[ci] = m;
      (*invstd)[ci] = 1.0 / std::sqrt(v + eps);
      rm[ci] = (1.0 - mom) * rm[ci] + mom * m;
      rv[ci] = (1.0 - mom) * rv[ci] + mom * v * unbias;
    });
  } else {
    const double* rm = bn.running_mean.data();
    const double* rv = bn.running_var.data();
    for (int ci = 0; ci < c; ++ci) {
      (*mean)[ci] = rm[ci];
      (*invstd)[ci] = 1.0 / std::sqrt(rv[ci] + bn.eps);
    }
  }

  Tensor out(input.shape());
  double* out_p = out.data();
  const double* gm = bn.gamma.data();
  const double* bt = bn.beta.data();
  parallel_for(static_cast<std::int64_t>(b) * c, [&](std::int64_t idx) {
    const int ci = static_cast<int>(idx % c);
    const double m = (*mean)[ci], is = (*invstd)[ci];
    const double g = gm[ci], be = bt[ci];
    const double* p = in_p + idx * plane;
    double* o = out_p + idx * plane;
    for (std::int64_t i = 0; i < plane; ++i) o[i] = g * (p[i] - m) * is + be;
  });

  if (tape && (input.requires_grad() || bn.gamma.requires_grad() ||
               bn.beta.requires_grad())) {
    out.set_requires_grad(true);
    Tensor in_t = input, gamma_t = bn.gamma, beta_t = bn.beta, out_t = out;
    const bool train = mode == Mode::kTrain;
    tape->record([in_t, gamma_t, beta_t, out_t, mean, invstd, plane,
                  train]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      const int b = in_t.dim(0), c = in_t.dim(1);
      const std::int64_t n_stat = static_cast<std::int64_t>(b) * plane;
      const double* x = in_t.data();
      const double* gm = gamma_t.data();
      double* dgamma = gamma_t.requires_grad() ? gamma_t.ensure_grad() : nullptr;
      double* dbeta = beta_t.requires_grad() ? beta_t.ensure_grad() : nullptr;
      double* dx = in_t.requires_grad() ? in_t.ensure_grad() : nullptr;
      parallel_for(c, [&](std::int64_t ci) {
        const double m = (*mean)[ci], is = (*invstd)[ci];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int bi = 0; bi < b; ++bi) {
          const std::int64_t base = (static_cast<std::int64_t>(bi) * c + ci) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double gv = g[base + i];
            sum_g += gv;
            sum_gx += gv * (x[base + i] - m) * is;
          }
        }
        if (dgamma) dgamma[ci] += sum_gx;
        if (dbeta) dbeta[ci] += sum_g;
        if (dx) {
          if (train) {
            const double coef = gm[ci] * is / static_cast<double>(n_stat);
            for (int bi = 0; bi < b; ++bi) {
              const std::int64_t base =
                  (static_cast<std::int64_t>(bi) * c + ci) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                const double xh = (x[base + i] - m) * is;
                dx[base + i] += coef * (static_cast<double>(n_stat) * g[base + i] -
                                        sum_g - xh * sum_gx);
              }
            }
          } else {
            const double coef = gm[ci] * is;
            for (int bi = 0; bi < b; ++bi) {
              const std::int64_t base =
                  (static_cast<std::int64_t>(bi) * c + ci) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                dx[base + i] += coef * g[base + i];
              }
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling; eval mode is the identity)
// ---------------------------------------------------------------------------

inline Tensor dropout(Tape* tape, const Tensor& input, double p, Mode mode,
                      Rng& rng) {
  detail::check_arg(input.defined(), "dropout: undefined input");
  detail::check_arg(p >= 0.0 && p < 1.0,
                    "dropout: p must be in [0,1), got " + std::to_string(p));
  if (mode == Mode::kEval || p == 0.0) {
    // Identity, but still a distinct node so the input is never aliased
    // with requires_grad toggled.
    Tensor out = Tensor::from_data(input.shape(), input.values());
    if (detail::wants_grad(tape, input)) {
      out.set_requires_grad(true);
      Tensor in_t = input, out_t = out;
      tape->record([in_t, out_t]() mutable {
        if (!out_t.has_grad()) return;
        const double* g = out_t.grad_data();
        double* din = in_t.ensure_grad();
        const std::int64_t n = in_t.numel();
        for (std::int64_t i = 0; i < n; ++i) din[i] += g[i];
      });
    }
    return out;
  }
  const std::int64_t n = input.numel();
  // Mask is drawn sequentially from the run RNG so results do not depend on
  // thread scheduling.
  auto mask = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(n));
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::int64_t i = 0; i < n; ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
  }
  Tensor out(input.shape());
  const double* in_p = input.data();
  double* out_p = out.data();
  for (std::int64_t i = 0; i < n; ++i) out_p[i] = in_p[i] * (*mask)[i];
  if (detail::wants_grad(tape, input)) {
    out.set_requires_grad(true);
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, mask]() mutable {
      if (!out_t.has_grad()) return;
      const double* g = out_t.grad_data();
      double* din = in_t.ensure_grad();
      const std::int64_t n = in_t.numel();
      for (std::int64_t i = 0; i < n; ++i) din[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

}  // namespace ftfd
