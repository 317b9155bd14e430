#include <algorithm>
#include <cmath>
#include <limits>

#include "patchrot/tensor.hpp"

namespace patchrot {

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorKind::ShapeMismatch, what);
}

void require_rank(const Var& v, int rank, const char* op) {
  require(v.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_string(v.shape()));
}


struct ConvGeometry {
  int n, c, h, w;     // input
  int o, kh, kw;      // kernel
  int stride, ph, pw;
  int oh, ow;         // output

  int k() const { return c * kh * kw; }
  int p() const { return oh * ow; }

  // Output columns [lo, hi) whose tap for kernel column kj lands inside the row.
  std::pair<int, int> valid_cols(int kj) const {
    const int shift = kj - pw;
    int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
    int hi = w - shift <= 0 ? 0 : (w - shift + stride - 1) / stride;
    lo = std::min(lo, ow);
    hi = std::clamp(hi, lo, ow);
    return {lo, hi};
  }
};

// Column matrix of one sample: row (ch, ki, kj) holds that input tap for every
// output position oy * ow + ox. Convolution runs one sample at a time so the
// K x P block stays cache-resident.
void im2col(const float* plane0, const ConvGeometry& g, RowMatrixXf& cols) {
  cols.resize(g.k(), g.p());
  for (int ch = 0; ch < g.c; ++ch) {
    const float* plane = plane0 + static_cast<std::size_t>(ch) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        float* out = cols.row((ch * g.kh + ki) * g.kw + kj).data();
        const auto [lo, hi] = g.valid_cols(kj);
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.ph + ki;
          float* line = out + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(line, line + g.ow, 0.0f);
            continue;
          }
          const float* in_row = plane + static_cast<std::size_t>(iy) * g.w + (kj - g.pw);
          std::fill(line, line + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(in_row + lo, in_row + hi, line + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) line[ox] = in_row[ox * g.stride];
          }
          std::fill(line + hi, line + g.ow, 0.0f);
        }
      }
    }
  }
}

void col2im(const RowMatrixXf& cols, const ConvGeometry& g, float* plane0) {
  for (int ch = 0; ch < g.c; ++ch) {
    float* plane = plane0 + static_cast<std::size_t>(ch) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const float* in = cols.row((ch * g.kh + ki) * g.kw + kj).data();
        const auto [lo, hi] = g.valid_cols(kj);
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.ph + ki;
          if (iy < 0 || iy >= g.h) continue;
          const float* line = in + static_cast<std::size_t>(oy) * g.ow;
          float* out_row = plane + static_cast<std::size_t>(iy) * g.w + (kj - g.pw);
          for (int ox = lo; ox < hi; ++ox) out_row[ox * g.stride] += line[ox];
        }
      }
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(),
          "add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  out.vec() += b.value().vec();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id())) t.accumulate_grad(a.id(), Tensor(g));
    if (t.requires_grad(b.id())) t.accumulate_grad(b.id(), Tensor(g));
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(),
          "mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  out.vec().array() *= b.value().vec().array();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id())) {
      t.grad_buffer(a.id()).vec().array() += g.vec().array() * b.value().vec().array();
    }
    if (t.requires_grad(b.id())) {
      t.grad_buffer(b.id()).vec().array() += g.vec().array() * a.value().vec().array();
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.shape()[1] == b.shape()[0],
          "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out(Shape{a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id())) {
      t.grad_buffer(a.id()).matrix().noalias() += g.matrix() * b.value().matrix().transpose();
    }
    if (t.requires_grad(b.id())) {
      t.grad_buffer(b.id()).matrix().noalias() += a.value().matrix().transpose() * g.matrix();
    }
  });
}

Var conv2d(const Var& x, const Var& weight, int stride, Padding padding) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  require(stride >= 1, "conv2d: stride must be >= 1");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require(xs[1] == ws[1], "conv2d: input channels " + std::to_string(xs[1]) +
                              " vs kernel channels " + std::to_string(ws[1]));
  ConvGeometry g{};
  g.n = xs[0];
  g.c = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.o = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = stride;
  g.ph = padding == Padding::Same ? (g.kh - 1) / 2 : 0;
  g.pw = padding == Padding::Same ? (g.kw - 1) / 2 : 0;
  require(g.h + 2 * g.ph >= g.kh && g.w + 2 * g.pw >= g.kw, "conv2d: kernel larger than input");
  g.oh = (g.h + 2 * g.ph - g.kh) / stride + 1;
  g.ow = (g.w + 2 * g.pw - g.kw) / stride + 1;

  const std::size_t in_size = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_size = static_cast<std::size_t>(g.o) * g.p();
  const ConstMatrixMap w_mat(weight.value().data().data(), g.o, g.k());
  Tensor out(Shape{g.n, g.o, g.oh, g.ow});
  RowMatrixXf cols;
  for (int n = 0; n < g.n; ++n) {
    im2col(x.value().data().data() + n * in_size, g, cols);
    MatrixMap(out.data().data() + n * out_size, g.o, g.p()).noalias() = w_mat * cols;
  }

  return x.tape().record(std::move(out), {x, weight}, [x, weight, g](Tape& t, const Tensor& grad) {
    const std::size_t in_size = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_size = static_cast<std::size_t>(g.o) * g.p();
    const bool need_w = t.requires_grad(weight.id());
    const bool need_x = t.requires_grad(x.id());
    const ConstMatrixMap w_mat(weight.value().data().data(), g.o, g.k());
    float* dw_data = need_w ? t.grad_buffer(weight.id()).data().data() : nullptr;
    float* dx_data = need_x ? t.grad_buffer(x.id()).data().data() : nullptr;
    RowMatrixXf cols;
    RowMatrixXf dcols;
    for (int n = 0; n < g.n; ++n) {
      const ConstMatrixMap dy(grad.data().data() + n * out_size, g.o, g.p());
      if (need_w) {
        im2col(x.value().data().data() + n * in_size, g, cols);
        MatrixMap(dw_data, g.o, g.k()).noalias() += dy * cols.transpose();
      }
      if (need_x) {
        dcols.noalias() = w_mat.transpose() * dy;
        col2im(dcols, g, dx_data + n * in_size);
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  out.vec() = out.vec().cwiseMax(0.0f);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x.id())) return;
    Tensor dx(g.shape());
    dx.vec().array() = (x.value().vec().array() > 0.0f).select(g.vec().array(), 0.0f);
    t.accumulate_grad(x.id(), std::move(dx));
  });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                bool training, float momentum, float epsilon) {
  require_rank(x, 4, "batchnorm2d");
  const int n = x.shape()[0];
  const int c = x.shape()[1];
  const int hw = x.shape()[2] * x.shape()[3];
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
          "batchnorm2d: affine parameters must have shape [" + std::to_string(c) + "]");
  require(stats.running_mean.shape() == Shape{c}, "batchnorm2d: running stats size");
  const std::size_t count = static_cast<std::size_t>(n) * hw;
  require(!training || count > 1, "batchnorm2d: training needs more than one value per channel");

  const float* xv = x.value().data().data();
  std::vector<float> mean(static_cast<std::size_t>(c));
  std::vector<float> inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const float* plane = xv + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) s += plane[j];
      }
      const double mu = s / static_cast<double>(count);
      double sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const float* plane = xv + (static_cast<std::size_t>(i) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) {
          const double d = plane[j] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[ch] = static_cast<float>(mu);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + epsilon));
      const double unbiased = sq / static_cast<double>(count - 1);
      stats.running_mean[ch] = static_cast<float>((1.0 - momentum) * stats.running_mean[ch] + momentum * mu);
      stats.running_var[ch] =
          static_cast<float>((1.0 - momentum) * stats.running_var[ch] + momentum * unbiased);
    } else {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(stats.running_var[ch]) + epsilon));
    }
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
      const float g = gamma.value()[ch];
      const float b = beta.value()[ch];
      for (int j = 0; j < hw; ++j) {
        const float h = (xv[off + j] - mean[ch]) * inv_std[ch];
        xhat[off + j] = h;
        out[off + j] = g * h + b;
      }
    }
  }

  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), training, n, c,
       hw](Tape& t, const Tensor& g) {
        const double m = static_cast<double>(n) * hw;
        std::vector<double> sum_dy(static_cast<std::size_t>(c), 0.0);
        std::vector<double> sum_dy_xhat(static_cast<std::size_t>(c), 0.0);
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
            for (int j = 0; j < hw; ++j) {
              sum_dy[ch] += g[off + j];
              sum_dy_xhat[ch] += static_cast<double>(g[off + j]) * xhat[off + j];
            }
          }
        }
        if (t.requires_grad(gamma.id())) {
          Tensor& dg = t.grad_buffer(gamma.id());
          for (int ch = 0; ch < c; ++ch) dg[ch] += static_cast<float>(sum_dy_xhat[ch]);
        }
        if (t.requires_grad(beta.id())) {
          Tensor& db = t.grad_buffer(beta.id());
          for (int ch = 0; ch < c; ++ch) db[ch] += static_cast<float>(sum_dy[ch]);
        }
        if (!t.requires_grad(x.id())) return;
        Tensor dx(g.shape());
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
            const float scale = gamma.value()[ch] * inv_std[ch];
            if (training) {
              const float mean_dy = static_cast<float>(sum_dy[ch] / m);
              const float mean_dy_xhat = static_cast<float>(sum_dy_xhat[ch] / m);
              for (int j = 0; j < hw; ++j) {
                dx[off + j] = scale * (g[off + j] - mean_dy - xhat[off + j] * mean_dy_xhat);
              }
            } else {
              for (int j = 0; j < hw; ++j) dx[off + j] = scale * g[off + j];
            }
          }
        }
        t.accumulate_grad(x.id(), std::move(dx));
      });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.shape()[0];
  const int c = x.shape()[1];
  const int hw = x.shape()[2] * x.shape()[3];
  Tensor out(Shape{n, c});
  const float* src = x.value().data().data();
  for (std::size_t p = 0; p < out.size(); ++p) {
    double acc = 0.0;
    for (int j = 0; j < hw; ++j) acc += src[p * static_cast<std::size_t>(hw) + static_cast<std::size_t>(j)];
    out[p] = static_cast<float>(acc / hw);
  }
  return x.tape().record(std::move(out), {x}, [x, n, c, hw](Tape& t, const Tensor& g) {
    if (!t.requires_grad(x.id())) return;
    MatrixMap dx(t.grad_buffer(x.id()).data().data(), static_cast<Eigen::Index>(n) * c, hw);
    dx.colwise() += g.vec() / static_cast<float>(hw);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  require(x.shape()[1] == weight.shape()[1], "linear: input features " +
                                                 std::to_string(x.shape()[1]) + " vs weight " +
                                                 shape_string(weight.shape()));
  require(bias.shape() == Shape{weight.shape()[0]}, "linear: bias shape");
  Tensor out(Shape{x.shape()[0], weight.shape()[0]});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  out.matrix().rowwise() += bias.value().vec().transpose();
  return x.tape().record(std::move(out), {x, weight, bias}, [x, weight, bias](Tape& t, const Tensor& g) {
    if (t.requires_grad(x.id())) {
      t.grad_buffer(x.id()).matrix().noalias() += g.matrix() * weight.value().matrix();
    }
    if (t.requires_grad(weight.id())) {
      t.grad_buffer(weight.id()).matrix().noalias() += g.matrix().transpose() * x.value().matrix();
    }
    if (t.requires_grad(bias.id())) {
      Tensor& db = t.grad_buffer(bias.id());
      const auto gm = g.matrix();
      for (Eigen::Index col = 0; col < gm.cols(); ++col) {
        double acc = 0.0;
        for (Eigen::Index row = 0; row < gm.rows(); ++row) acc += gm(row, col);
        db[static_cast<std::size_t>(col)] += static_cast<float>(acc);
      }
    }
  });
}

Var concat(std::span<const Var> parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const Var& p : parts) {
    require(&p.tape() == &parts[0].tape(), "concat: operands on different tapes");
    const Shape& s = p.shape();
    require(static_cast<int>(s.size()) == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis) require(s[d] == first[d], "concat: extent mismatch on axis " + std::to_string(d));
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(first[d]);
  std::size_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(first[d]);
  const std::size_t out_chunk = static_cast<std::size_t>(out_shape[axis]) * inner;

  Tensor out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = static_cast<std::size_t>(p.shape()[axis]) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      const float* src = p.value().data().data() + o * chunk;
      std::copy(src, src + chunk, out.data().data() + o * out_chunk + offset);
    }
    offset += chunk;
  }

  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape().record(
      std::move(out), parts, [saved, offsets, outer, inner, out_chunk, axis](Tape& t, const Tensor& g) {
        for (std::size_t i = 0; i < saved.size(); ++i) {
          const Var& p = saved[i];
          if (!t.requires_grad(p.id())) continue;
          const std::size_t chunk = static_cast<std::size_t>(p.shape()[axis]) * inner;
          float* dst = t.grad_buffer(p.id()).data().data();
          for (std::size_t o = 0; o < outer; ++o) {
            const float* src = g.data().data() + o * out_chunk + offsets[i];
            for (std::size_t j = 0; j < chunk; ++j) dst[o * chunk + j] += src[j];
          }
        }
      });
}

Var concat(const Var& a, const Var& b, int axis) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts), axis);
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const int n = logits.shape()[0];
  const int k = logits.shape()[1];
  require(n >= 1 && static_cast<std::size_t>(n) == labels.size(),
          "softmax_cross_entropy: label count " + std::to_string(labels.size()) + " vs batch " +
              std::to_string(n));
  for (const int y : labels) {
    if (y < 0 || y >= k) {
      throw Error(ErrorKind::InvalidClass, "label " + std::to_string(y) + " outside [0," +
                                               std::to_string(k) + ")");
    }
  }
  Tensor probs = softmax(logits.value());
  double total = 0.0;
  const float* z = logits.value().data().data();
  for (int i = 0; i < n; ++i) {
    const float* row = z + static_cast<std::size_t>(i) * k;
    const float mx = *std::max_element(row, row + k);
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(acc) + mx - row[labels[static_cast<std::size_t>(i)]];
  }
  Tensor out(Shape{}, static_cast<float>(total / n));
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape().record(std::move(out), {logits},
                              [logits, probs = std::move(probs), y = std::move(y), n, k](
                                  Tape& t, const Tensor& g) {
                                Tensor& d = t.grad_buffer(logits.id());
                                const float scale = g[0] / static_cast<float>(n);
                                for (int i = 0; i < n; ++i) {
                                  for (int j = 0; j < k; ++j) {
                                    const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                                    const float target = j == y[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
                                    d[idx] += scale * (probs[idx] - target);
                                  }
                                }
                              });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (const float v : x.value().data()) acc += v;
  Tensor out(Shape{}, static_cast<float>(acc));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    if (t.requires_grad(x.id())) t.grad_buffer(x.id()).vec().array() += g[0];
  });
}

Var shortcut_pad(const Var& x, int out_channels, int stride) {
  require_rank(x, 4, "shortcut_pad");
  const int n = x.shape()[0];
  const int c = x.shape()[1];
  const int h = x.shape()[2];
  const int w = x.shape()[3];
  require(out_channels >= c && stride >= 1, "shortcut_pad: cannot shrink channels");
  const int oh = (h + stride - 1) / stride;
  const int ow = (w + stride - 1) / stride;
  const int offset = (out_channels - c) / 2;
  Tensor out(Shape{n, out_channels, oh, ow}, 0.0f);
  auto index = [](int a, int b, int cc, int d, int nb, int nc, int nd) {
    return ((static_cast<std::size_t>(a) * nb + b) * nc + cc) * nd + d;
  };
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          out[index(i, ch + offset, y, xx, out_channels, oh, ow)] =
              x.value()[index(i, ch, y * stride, xx * stride, c, h, w)];
  return x.tape().record(std::move(out), {x},
                         [x, n, c, h, w, oh, ow, offset, out_channels, stride, index](Tape& t,
                                                                                     const Tensor& g) {
                           Tensor& dx = t.grad_buffer(x.id());
                           for (int i = 0; i < n; ++i)
                             for (int ch = 0; ch < c; ++ch)
                               for (int y = 0; y < oh; ++y)
                                 for (int xx = 0; xx < ow; ++xx)
                                   dx[index(i, ch, y * stride, xx * stride, c, h, w)] +=
                                       g[index(i, ch + offset, y, xx, out_channels, oh, ow)];
                         });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "softmax expects N x K");
  Tensor out = logits;
  const int k = logits.dim(1);
  for (int i = 0; i < logits.dim(0); ++i) {
    float* row = out.data().data() + static_cast<std::size_t>(i) * k;
    const float mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (int j = 0; j < k; ++j) row[j] = static_cast<float>(row[j] / total);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  // Ties resolve to the lowest index.
  const auto m = logits.matrix();
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace patchrot
