#include "nvs/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nvs::ag {
namespace {

template <typename S>
using StridedMap = Eigen::Map<RowMatrix<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMatrix<S>, 0, Eigen::OuterStride<>>;

template <typename S>
S sigmoid_scalar(S x) {
  return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

Index leading_stride(const Shape& shape) { return shape.empty() ? 1 : shape_size(shape) / shape[0]; }

struct ConvGeometry {
  Index n, h, w, cin, cout, k, stride, ho, wo, pad_top, pad_left;
};

template <typename S>
ConvGeometry conv_geometry(const Tensor<S>& x, const Tensor<S>& kernel, int stride) {
  if (x.rank() != 4 || kernel.rank() != 4) throw std::invalid_argument("conv2d expects NHWC input and 4-d kernel");
  if (kernel.dim(0) != kernel.dim(1)) throw std::invalid_argument("conv2d expects a square kernel");
  if (kernel.dim(2) != x.dim(3)) {
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_string(x.shape()) + " kernel " +
                                shape_string(kernel.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d stride must be positive");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cin = x.dim(3);
  g.cout = kernel.dim(3);
  g.k = kernel.dim(0);
  g.stride = stride;
  g.ho = (g.h + stride - 1) / stride;
  g.wo = (g.w + stride - 1) / stride;
  g.pad_top = std::max<Index>((g.ho - 1) * stride + g.k - g.h, 0) / 2;
  g.pad_left = std::max<Index>((g.wo - 1) * stride + g.k - g.w, 0) / 2;
  return g;
}

template <typename S>
void im2col(const ConvGeometry& g, const S* image, RowMatrix<S>& cols) {
  cols.setZero(g.ho * g.wo, g.k * g.k * g.cin);
  for (Index oy = 0; oy < g.ho; ++oy) {
    for (Index ox = 0; ox < g.wo; ++ox) {
      S* row = cols.data() + (oy * g.wo + ox) * cols.cols();
      for (Index ky = 0; ky < g.k; ++ky) {
        Index iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.h) continue;
        for (Index kx = 0; kx < g.k; ++kx) {
          Index ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.w) continue;
          std::copy_n(image + (iy * g.w + ix) * g.cin, g.cin, row + (ky * g.k + kx) * g.cin);
        }
      }
    }
  }
}

template <typename S>
void col2im(const ConvGeometry& g, const RowMatrix<S>& cols, S* image) {
  for (Index oy = 0; oy < g.ho; ++oy) {
    for (Index ox = 0; ox < g.wo; ++ox) {
      const S* row = cols.data() + (oy * g.wo + ox) * cols.cols();
      for (Index ky = 0; ky < g.k; ++ky) {
        Index iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.h) continue;
        for (Index kx = 0; kx < g.k; ++kx) {
          Index ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.w) continue;
          S* dst = image + (iy * g.w + ix) * g.cin;
          const S* src = row + (ky * g.k + kx) * g.cin;
          for (Index c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out(a.shape(), a.value().array() + b.value().array());
  return make_op<S>(std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
    accumulate(a, g.array());
    accumulate(b, g.array());
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out(a.shape(), a.value().array() - b.value().array());
  return make_op<S>(std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
    accumulate(a, g.array());
    accumulate(b, -g.array());
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<S> out(a.shape(), a.value().array() * b.value().array());
  return make_op<S>(std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
    accumulate(a, g.array() * b.value().array());
    accumulate(b, g.array() * a.value().array());
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out(a.shape(), a.value().array() * factor);
  return make_op<S>(std::move(out), {a}, [a, factor](const Tensor<S>& g) { accumulate(a, g.array() * factor); });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S offset) {
  Tensor<S> out(a.shape(), a.value().array() + offset);
  return make_op<S>(std::move(out), {a}, [a](const Tensor<S>& g) { accumulate(a, g.array()); });
}

template <typename S>
Var<S> mul_const(const Var<S>& a, const Tensor<S>& c) {
  require_same_shape(a.shape(), c.shape(), "mul_const");
  Tensor<S> out(a.shape(), a.value().array() * c.array());
  return make_op<S>(std::move(out), {a}, [a, c](const Tensor<S>& g) { accumulate(a, g.array() * c.array()); });
}

template <typename S>
Var<S> swish(const Var<S>& a) {
  const auto& x = a.value().array();
  typename Tensor<S>::Array sig = x.unaryExpr([](S v) { return sigmoid_scalar(v); });
  Tensor<S> out(a.shape(), x * sig);
  return make_op<S>(std::move(out), {a}, [a, sig = std::move(sig)](const Tensor<S>& g) {
    const auto& x = a.value().array();
    accumulate(a, g.array() * sig * (S(1) + x * (S(1) - sig)));
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out(a.shape(), a.value().array().max(S(0)));
  return make_op<S>(std::move(out), {a}, [a](const Tensor<S>& g) {
    accumulate(a, (a.value().array() > S(0)).select(g.array(), S(0)));
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  typename Tensor<S>::Array sig = a.value().array().unaryExpr([](S v) { return sigmoid_scalar(v); });
  Tensor<S> out(a.shape(), sig);
  return make_op<S>(std::move(out), {a}, [a, sig = std::move(sig)](const Tensor<S>& g) {
    accumulate(a, g.array() * sig * (S(1) - sig));
  });
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  const auto& x = a.value().array();
  Tensor<S> out(a.shape(), x.unaryExpr([](S v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, S(0)); }));
  return make_op<S>(std::move(out), {a}, [a](const Tensor<S>& g) {
    accumulate(a, g.array() * a.value().array().unaryExpr([](S v) { return sigmoid_scalar(v); }));
  });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  Tensor<S> out = Tensor<S>::constant({}, a.value().array().sum());
  return make_op<S>(std::move(out), {a}, [a](const Tensor<S>& g) {
    accumulate(a, Tensor<S>::Array::Constant(a.size(), g[0]));
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  const S n = static_cast<S>(a.size());
  Tensor<S> out = Tensor<S>::constant({}, a.value().array().sum() / n);
  return make_op<S>(std::move(out), {a}, [a, n](const Tensor<S>& g) {
    accumulate(a, Tensor<S>::Array::Constant(a.size(), g[0] / n));
  });
}

template <typename S>
Var<S> mse(const Var<S>& a, const Tensor<S>& target) {
  require_same_shape(a.shape(), target.shape(), "mse");
  const S n = static_cast<S>(a.size());
  Tensor<S> out = Tensor<S>::constant({}, (a.value().array() - target.array()).square().sum() / n);
  return make_op<S>(std::move(out), {a}, [a, target, n](const Tensor<S>& g) {
    accumulate(a, (a.value().array() - target.array()) * (S(2) * g[0] / n));
  });
}

template <typename S>
Var<S> group_sum_cols(const Var<S>& a, const std::vector<int>& group_of, int groups) {
  const Index e = a.dim(-1);
  if (static_cast<Index>(group_of.size()) != e) throw std::invalid_argument("group_sum_cols: map size mismatch");
  const Index m = a.size() / e;
  Tensor<S> out({m, groups});
  auto in = a.value().matrix(e);
  auto o = out.matrix(groups);
  for (Index j = 0; j < e; ++j) o.col(group_of[j]) += in.col(j);
  return make_op<S>(std::move(out), {a}, [a, group_of, groups, e, m](const Tensor<S>& g) {
    RowMatrix<S> ga(m, e);
    auto gm = g.matrix(groups);
    for (Index j = 0; j < e; ++j) ga.col(j) = gm.col(group_of[j]);
    accumulate(a, Eigen::Map<const typename Tensor<S>::Array>(ga.data(), ga.size()));
  });
}

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  Tensor<S> out = a.value().reshaped(std::move(shape));
  return make_op<S>(std::move(out), {a}, [a](const Tensor<S>& g) { accumulate(a, g.array()); });
}

template <typename S>
Var<S> concat_last(const Var<S>& a, const Var<S>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw std::invalid_argument("concat_last: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  const Index ca = sa.back(), cb = sb.back();
  Shape so = sa;
  so.back() = ca + cb;
  Tensor<S> out(so);
  auto o = out.matrix(ca + cb);
  o.leftCols(ca) = a.value().matrix(ca);
  o.rightCols(cb) = b.value().matrix(cb);
  return make_op<S>(std::move(out), {a, b}, [a, b, ca, cb](const Tensor<S>& g) {
    auto gm = g.matrix(ca + cb);
    if (a.requires_grad()) a.node()->grad_buffer().matrix(ca) += gm.leftCols(ca);
    if (b.requires_grad()) b.node()->grad_buffer().matrix(cb) += gm.rightCols(cb);
  });
}

template <typename S>
Var<S> slice_last(const Var<S>& a, Index begin, Index count) {
  const Index c = a.dim(-1);
  if (begin < 0 || count < 0 || begin + count > c) throw std::invalid_argument("slice_last: range out of bounds");
  Shape so = a.shape();
  so.back() = count;
  Tensor<S> out(so);
  out.matrix(count) = a.value().matrix(c).middleCols(begin, count);
  return make_op<S>(std::move(out), {a}, [a, begin, count, c](const Tensor<S>& g) {
    if (a.requires_grad()) a.node()->grad_buffer().matrix(c).middleCols(begin, count) += g.matrix(count);
  });
}

template <typename S>
Var<S> gather_rows(const Var<S>& a, const std::vector<Index>& index) {
  const Index stride = leading_stride(a.shape());
  Shape so = a.shape();
  so[0] = static_cast<Index>(index.size());
  Tensor<S> out(so);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
    out.array().segment(i * stride, stride) = a.value().array().segment(index[i] * stride, stride);
  }
  return make_op<S>(std::move(out), {a}, [a, index, stride](const Tensor<S>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_buffer().array();
    for (std::size_t i = 0; i < index.size(); ++i) {
      ga.segment(index[i] * stride, stride) += g.array().segment(i * stride, stride);
    }
  });
}

template <typename S>
Var<S> scatter_rows(const Var<S>& a, const std::vector<Index>& index, Index rows) {
  if (static_cast<Index>(index.size()) != a.dim(0)) throw std::invalid_argument("scatter_rows: one index per row");
  const Index stride = leading_stride(a.shape());
  Shape so = a.shape();
  so[0] = rows;
  Tensor<S> out = Tensor<S>::zeros(so);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows) throw std::invalid_argument("scatter_rows: index out of range");
    out.array().segment(index[i] * stride, stride) += a.value().array().segment(i * stride, stride);
  }
  return make_op<S>(std::move(out), {a}, [a, index, stride](const Tensor<S>& g) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_buffer().array();
    for (std::size_t i = 0; i < index.size(); ++i) {
      ga.segment(i * stride, stride) += g.array().segment(index[i] * stride, stride);
    }
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Shape so = parts[0].shape();
  const Index stride = leading_stride(so);
  Index rows = 0;
  for (const auto& p : parts) {
    if (leading_stride(p.shape()) != stride || p.shape().size() != so.size()) {
      throw std::invalid_argument("concat_rows: incompatible shapes");
    }
    rows += p.dim(0);
  }
  so[0] = rows;
  Tensor<S> out(so);
  Index offset = 0;
  for (const auto& p : parts) {
    out.array().segment(offset, p.size()) = p.value().array();
    offset += p.size();
  }
  return make_op<S>(std::move(out), parts, [parts](const Tensor<S>& g) {
    Index offset = 0;
    for (const auto& p : parts) {
      accumulate(p, g.array().segment(offset, p.size()));
      offset += p.size();
    }
  });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool transpose_b) {
  if (b.value().rank() != 2) throw std::invalid_argument("matmul expects a 2-d right operand");
  const Index k = transpose_b ? b.dim(1) : b.dim(0);
  const Index n = transpose_b ? b.dim(0) : b.dim(1);
  if (a.dim(-1) != k) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  Shape so = a.shape();
  so.back() = n;
  Tensor<S> out(so);
  auto bm = b.value().matrix();
  if (transpose_b) {
    out.matrix(n).noalias() = a.value().matrix(k) * bm.transpose();
  } else {
    out.matrix(n).noalias() = a.value().matrix(k) * bm;
  }
  return make_op<S>(std::move(out), {a, b}, [a, b, k, n, transpose_b](const Tensor<S>& g) {
    auto gm = g.matrix(n);
    auto bm = b.value().matrix();
    if (a.requires_grad()) {
      auto ga = a.node()->grad_buffer().matrix(k);
      if (transpose_b) {
        ga.noalias() += gm * bm;
      } else {
        ga.noalias() += gm * bm.transpose();
      }
    }
    if (b.requires_grad()) {
      auto gb = b.node()->grad_buffer().matrix();
      if (transpose_b) {
        gb.noalias() += gm.transpose() * a.value().matrix(k);
      } else {
        gb.noalias() += a.value().matrix(k).transpose() * gm;
      }
    }
  });
}

template <typename S>
Var<S> dense(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  const Index cin = weight.dim(0), cout = weight.dim(1);
  if (x.dim(-1) != cin) {
    throw std::invalid_argument("dense: input " + shape_string(x.shape()) + " incompatible with weight " +
                                shape_string(weight.shape()));
  }
  Shape so = x.shape();
  so.back() = cout;
  Tensor<S> out(so);
  auto o = out.matrix(cout);
  o.noalias() = x.value().matrix(cin) * weight.value().matrix(cout);
  const bool has_bias = static_cast<bool>(bias);
  if (has_bias) o.rowwise() += bias.value().matrix(cout).row(0);
  std::vector<Var<S>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op<S>(std::move(out), inputs, [x, weight, bias, cin, cout, has_bias](const Tensor<S>& g) {
    auto gm = g.matrix(cout);
    if (x.requires_grad()) x.node()->grad_buffer().matrix(cin).noalias() += gm * weight.value().matrix(cout).transpose();
    if (weight.requires_grad()) weight.node()->grad_buffer().matrix(cout).noalias() += x.value().matrix(cin).transpose() * gm;
    if (has_bias && bias.requires_grad()) bias.node()->grad_buffer().matrix(cout).row(0) += gm.colwise().sum();
  });
}

template <typename S>
Var<S> mul_row(const Var<S>& x, const Var<S>& v) {
  const Index c = v.size();
  if (x.dim(-1) != c) throw std::invalid_argument("mul_row: channel mismatch");
  Tensor<S> out(x.shape());
  out.matrix(c) = x.value().matrix(c).array().rowwise() * v.value().matrix(c).row(0).array();
  return make_op<S>(std::move(out), {x, v}, [x, v, c](const Tensor<S>& g) {
    auto gm = g.matrix(c);
    if (x.requires_grad()) {
      x.node()->grad_buffer().matrix(c).array() += gm.array().rowwise() * v.value().matrix(c).row(0).array();
    }
    if (v.requires_grad()) {
      v.node()->grad_buffer().matrix(c).row(0) += (gm.array() * x.value().matrix(c).array()).colwise().sum().matrix();
    }
  });
}

template <typename S>
Var<S> add_spatial(const Var<S>& x, const Var<S>& v) {
  const Index n = x.dim(0), c = x.dim(-1);
  if (v.dim(0) != n || v.size() != n * c) {
    throw std::invalid_argument("add_spatial: " + shape_string(x.shape()) + " vs " + shape_string(v.shape()));
  }
  const Index per = x.size() / (n * c);
  Tensor<S> out = x.value();
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<RowMatrix<S>>(out.data() + i * per * c, per, c).rowwise() += v.value().matrix(c).row(i);
  }
  return make_op<S>(std::move(out), {x, v}, [x, v, n, c, per](const Tensor<S>& g) {
    accumulate(x, g.array());
    if (!v.requires_grad()) return;
    auto gv = v.node()->grad_buffer().matrix(c);
    for (Index i = 0; i < n; ++i) {
      gv.row(i) += Eigen::Map<const RowMatrix<S>>(g.data() + i * per * c, per, c).colwise().sum();
    }
  });
}

template <typename S>
Var<S> add_broadcast(const Var<S>& x, const Var<S>& v) {
  const Index stride = v.size();
  if (x.size() % stride != 0 || leading_stride(x.shape()) != stride) {
    throw std::invalid_argument("add_broadcast: " + shape_string(x.shape()) + " vs " + shape_string(v.shape()));
  }
  Tensor<S> out = x.value();
  out.matrix(stride).rowwise() += v.value().matrix(stride).row(0);
  return make_op<S>(std::move(out), {x, v}, [x, v, stride](const Tensor<S>& g) {
    accumulate(x, g.array());
    if (v.requires_grad()) v.node()->grad_buffer().matrix(stride).row(0) += g.matrix(stride).colwise().sum();
  });
}

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& kernel, const Var<S>& bias, int stride) {
  const ConvGeometry geo = conv_geometry(x.value(), kernel.value(), stride);
  Tensor<S> out({geo.n, geo.ho, geo.wo, geo.cout});
  const Index in_stride = geo.h * geo.w * geo.cin, out_rows = geo.ho * geo.wo;
  auto wm = kernel.value().matrix(geo.cout);
  RowMatrix<S> cols;
  for (Index i = 0; i < geo.n; ++i) {
    im2col(geo, x.value().data() + i * in_stride, cols);
    Eigen::Map<RowMatrix<S>> o(out.data() + i * out_rows * geo.cout, out_rows, geo.cout);
    o.noalias() = cols * wm;
    if (bias) o.rowwise() += bias.value().matrix(geo.cout).row(0);
  }
  std::vector<Var<S>> inputs{x, kernel};
  if (bias) inputs.push_back(bias);
  return make_op<S>(std::move(out), inputs, [x, kernel, bias, geo](const Tensor<S>& g) {
    const Index in_stride = geo.h * geo.w * geo.cin, out_rows = geo.ho * geo.wo;
    auto wm = kernel.value().matrix(geo.cout);
    RowMatrix<S> cols, dcols;
    for (Index i = 0; i < geo.n; ++i) {
      Eigen::Map<const RowMatrix<S>> go(g.data() + i * out_rows * geo.cout, out_rows, geo.cout);
      if (kernel.requires_grad()) {
        im2col(geo, x.value().data() + i * in_stride, cols);
        kernel.node()->grad_buffer().matrix(geo.cout).noalias() += cols.transpose() * go;
      }
      if (bias && bias.requires_grad()) bias.node()->grad_buffer().matrix(geo.cout).row(0) += go.colwise().sum();
      if (x.requires_grad()) {
        dcols.noalias() = go * wm.transpose();
        col2im(geo, dcols, x.node()->grad_buffer().data() + i * in_stride);
      }
    }
  });
}

template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S epsilon) {
  const Index n = x.dim(0), c = x.dim(-1);
  if (groups <= 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(c) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  const Index per = x.size() / (n * c), cg = c / groups;
  const S count = static_cast<S>(per * cg);
  Eigen::Array<S, Eigen::Dynamic, 1> mu(n * groups), rstd(n * groups);
  Tensor<S> out(x.shape());
  auto gm = gamma.value().matrix(c).row(0).array();
  auto bm = beta.value().matrix(c).row(0).array();
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<const RowMatrix<S>> xi(x.value().data() + i * per * c, per, c);
    Eigen::Map<RowMatrix<S>> oi(out.data() + i * per * c, per, c);
    for (Index gi = 0; gi < groups; ++gi) {
      auto block = xi.middleCols(gi * cg, cg).array();
      const S m = block.sum() / count;
      const S var = (block - m).square().sum() / count;
      const S r = S(1) / std::sqrt(var + epsilon);
      mu[i * groups + gi] = m;
      rstd[i * groups + gi] = r;
      oi.middleCols(gi * cg, cg).array() =
          ((block - m) * r).rowwise() * gm.segment(gi * cg, cg) + bm.segment(gi * cg, cg).replicate(per, 1);
    }
  }
  return make_op<S>(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, mu, rstd, n, c, per, cg, groups, count](const Tensor<S>& g) {
    auto gam = gamma.value().matrix(c).row(0).array();
    Eigen::Array<S, 1, Eigen::Dynamic> dgamma = Eigen::Array<S, 1, Eigen::Dynamic>::Zero(c);
    Eigen::Array<S, 1, Eigen::Dynamic> dbeta = Eigen::Array<S, 1, Eigen::Dynamic>::Zero(c);
    for (Index i = 0; i < n; ++i) {
      Eigen::Map<const RowMatrix<S>> xi(x.value().data() + i * per * c, per, c);
      Eigen::Map<const RowMatrix<S>> gi_map(g.data() + i * per * c, per, c);
      for (Index gi = 0; gi < groups; ++gi) {
        const S m = mu[i * groups + gi], r = rstd[i * groups + gi];
        RowMatrix<S> xhat = (xi.middleCols(gi * cg, cg).array() - m) * r;
        auto dy = gi_map.middleCols(gi * cg, cg).array();
        dgamma.segment(gi * cg, cg) += (dy * xhat.array()).colwise().sum();
        dbeta.segment(gi * cg, cg) += dy.colwise().sum();
        if (x.requires_grad()) {
          RowMatrix<S> dxhat = (dy.rowwise() * gam.segment(gi * cg, cg)).matrix();
          const S mean_d = dxhat.sum() / count;
          const S mean_dx = (dxhat.array() * xhat.array()).sum() / count;
          Eigen::Map<RowMatrix<S>> gx(x.node()->grad_buffer().data() + i * per * c, per, c);
          gx.middleCols(gi * cg, cg).array() += r * (dxhat.array() - mean_d - xhat.array() * mean_dx);
        }
      }
    }
    if (gamma.requires_grad()) gamma.node()->grad_buffer().matrix(c).row(0).array() += dgamma;
    if (beta.requires_grad()) beta.node()->grad_buffer().matrix(c).row(0).array() += dbeta;
  });
}

template <typename S>
Var<S> avg_pool2(const Var<S>& x) {
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: odd spatial size " + shape_string(x.shape()));
  Tensor<S> out({n, h / 2, w / 2, c});
  const S* in = x.value().data();
  S* o = out.data();
  for (Index i = 0; i < n; ++i)
    for (Index y = 0; y < h / 2; ++y)
      for (Index xx = 0; xx < w / 2; ++xx)
        for (Index ch = 0; ch < c; ++ch) {
          auto at = [&](Index yy, Index xi) { return in[((i * h + yy) * w + xi) * c + ch]; };
          o[((i * (h / 2) + y) * (w / 2) + xx) * c + ch] =
              S(0.25) * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
        }
  return make_op<S>(std::move(out), {x}, [x, n, h, w, c](const Tensor<S>& g) {
    if (!x.requires_grad()) return;
    S* gx = x.node()->grad_buffer().data();
    for (Index i = 0; i < n; ++i)
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < w; ++xx)
          for (Index ch = 0; ch < c; ++ch)
            gx[((i * h + y) * w + xx) * c + ch] += S(0.25) * g[((i * (h / 2) + y / 2) * (w / 2) + xx / 2) * c + ch];
  });
}

template <typename S>
Var<S> upsample2(const Var<S>& x) {
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<S> out({n, 2 * h, 2 * w, c});
  for (Index i = 0; i < n; ++i)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index xx = 0; xx < 2 * w; ++xx)
        std::copy_n(x.value().data() + ((i * h + y / 2) * w + xx / 2) * c, c,
                    out.data() + ((i * 2 * h + y) * 2 * w + xx) * c);
  return make_op<S>(std::move(out), {x}, [x, n, h, w, c](const Tensor<S>& g) {
    if (!x.requires_grad()) return;
    S* gx = x.node()->grad_buffer().data();
    for (Index i = 0; i < n; ++i)
      for (Index y = 0; y < 2 * h; ++y)
        for (Index xx = 0; xx < 2 * w; ++xx)
          for (Index ch = 0; ch < c; ++ch)
            gx[((i * h + y / 2) * w + xx / 2) * c + ch] += g[((i * 2 * h + y) * 2 * w + xx) * c + ch];
  });
}

template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads) {
  const Index n = q.dim(0), lq = q.dim(1), c = q.dim(2), lk = k.dim(1);
  if (k.shape() != v.shape() || k.dim(0) != n || k.dim(2) != c) throw std::invalid_argument("attention: shape mismatch");
  if (heads <= 0 || c % heads != 0) throw std::invalid_argument("attention: channels not divisible by heads");
  const Index d = c / heads;
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(d));
  Tensor<S> out(q.shape());

  auto probs = [=](const Var<S>& qv, const Var<S>& kv, Index i, Index h) {
    ConstStridedMap<S> qh(qv.value().data() + i * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
    ConstStridedMap<S> kh(kv.value().data() + i * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
    RowMatrix<S> p = (qh * kh.transpose()) * scale_factor;
    for (Index r = 0; r < lq; ++r) {
      auto row = p.row(r).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
    return p;
  };

  for (Index i = 0; i < n; ++i) {
    for (Index h = 0; h < heads; ++h) {
      RowMatrix<S> p = probs(q, k, i, h);
      ConstStridedMap<S> vh(v.value().data() + i * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
      StridedMap<S> oh(out.data() + i * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
      oh.noalias() = p * vh;
    }
  }
  return make_op<S>(std::move(out), {q, k, v}, [q, k, v, n, lq, lk, c, d, heads, scale_factor, probs](const Tensor<S>& g) {
    for (Index i = 0; i < n; ++i) {
      for (Index h = 0; h < heads; ++h) {
        RowMatrix<S> p = probs(q, k, i, h);
        ConstStridedMap<S> go(g.data() + i * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
        ConstStridedMap<S> vh(v.value().data() + i * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
        if (v.requires_grad()) {
          StridedMap<S> gv(v.node()->grad_buffer().data() + i * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
          gv.noalias() += p.transpose() * go;
        }
        if (!q.requires_grad() && !k.requires_grad()) continue;
        RowMatrix<S> dp = go * vh.transpose();
        Eigen::Array<S, Eigen::Dynamic, 1> rowdot = (dp.array() * p.array()).rowwise().sum();
        RowMatrix<S> ds = (p.array() * (dp.array().colwise() - rowdot)) * scale_factor;
        if (q.requires_grad()) {
          ConstStridedMap<S> kh(k.value().data() + i * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
          StridedMap<S> gq(q.node()->grad_buffer().data() + i * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
          gq.noalias() += ds * kh;
        }
        if (k.requires_grad()) {
          ConstStridedMap<S> qh(q.value().data() + i * lq * c + h * d, lq, d, Eigen::OuterStride<>(c));
          StridedMap<S> gk(k.node()->grad_buffer().data() + i * lk * c + h * d, lk, d, Eigen::OuterStride<>(c));
          gk.noalias() += ds.transpose() * qh;
        }
      }
    }
  });
}

#define NVS_INSTANTIATE_OPS(S)                                                                   \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                       \
  template Var<S> add_scalar(const Var<S>&, S);                                                  \
  template Var<S> mul_const(const Var<S>&, const Tensor<S>&);                                    \
  template Var<S> swish(const Var<S>&);                                                          \
  template Var<S> relu(const Var<S>&);                                                           \
  template Var<S> sigmoid(const Var<S>&);                                                        \
  template Var<S> softplus(const Var<S>&);                                                       \
  template Var<S> sum(const Var<S>&);                                                            \
  template Var<S> mean(const Var<S>&);                                                           \
  template Var<S> mse(const Var<S>&, const Tensor<S>&);                                          \
  template Var<S> group_sum_cols(const Var<S>&, const std::vector<int>&, int);                   \
  template Var<S> reshape(const Var<S>&, Shape);                                                 \
  template Var<S> concat_last(const Var<S>&, const Var<S>&);                                     \
  template Var<S> slice_last(const Var<S>&, Index, Index);                                       \
  template Var<S> gather_rows(const Var<S>&, const std::vector<Index>&);                         \
  template Var<S> scatter_rows(const Var<S>&, const std::vector<Index>&, Index);                 \
  template Var<S> concat_rows(const std::vector<Var<S>>&);                                       \
  template Var<S> matmul(const Var<S>&, const Var<S>&, bool);                                    \
  template Var<S> dense(const Var<S>&, const Var<S>&, const Var<S>&);                            \
  template Var<S> mul_row(const Var<S>&, const Var<S>&);                                         \
  template Var<S> add_spatial(const Var<S>&, const Var<S>&);                                     \
  template Var<S> add_broadcast(const Var<S>&, const Var<S>&);                                   \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int);                      \
  template Var<S> group_norm(const Var<S>&, const Var<S>&, const Var<S>&, int, S);               \
  template Var<S> avg_pool2(const Var<S>&);                                                      \
  template Var<S> upsample2(const Var<S>&);                                                      \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, int);

NVS_INSTANTIATE_OPS(float)
NVS_INSTANTIATE_OPS(double)

}  // namespace nvs::ag
