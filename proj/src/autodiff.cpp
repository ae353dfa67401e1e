#include "attnet/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <memory>
#include <mutex>
#include <thread>
#include <utility>

#include "attnet/errors.hpp"
#include "attnet/rng.hpp"

namespace attnet {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Col layout: row (c*kh+i)*kw+j, column oy*OW+ox.
void im2col(const double* img, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, double* col) {
  const int64_t ohw = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    const double* plane = img + c * H * W;
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        double* row = col + ((c * kh + i) * kw + j) * ohw;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * OW, row + (oy + 1) * OW, 0.0);
            continue;
          }
          const double* src = plane + iy * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride - pad + j;
            row[oy * OW + ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t OH, int64_t OW, double* img) {
  const int64_t ohw = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    double* plane = img + c * H * W;
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const double* row = col + ((c * kh + i) * kw + j) * ohw;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) continue;
          double* dst = plane + iy * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t ix = ox * stride - pad + j;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * OW + ox];
          }
        }
      }
    }
  }
}

int g_num_threads = 1;

}  // namespace

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

void parallel_for(int64_t n_tasks, const std::function<void(int64_t)>& fn) {
  if (n_tasks <= 0) return;
  const int workers = static_cast<int>(std::min<int64_t>(g_num_threads, n_tasks));
  if (workers <= 1) {
    for (int64_t t = 0; t < n_tasks; ++t) fn(t);
    return;
  }
  std::atomic<int64_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&]() {
    for (;;) {
      const int64_t t = next.fetch_add(1);
      if (t >= n_tasks) return;
      try {
        fn(t);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers) - 1);
  for (int w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
    throw ShapeError("invalid tape variable");
  return nodes_[static_cast<size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
    throw ShapeError("invalid tape variable");
  return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::emit(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value, bool requires_grad) {
  return emit(std::move(value), requires_grad, {});
}

Tensor& Tape::grad_buf(Var v) {
  Node& n = node(v);
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.numel() == 0) return Tensor::zeros(n.value.shape());
  return n.grad;
}

void Tape::backward(Var scalar_loss) {
  Node& loss = node(scalar_loss);
  if (loss.value.numel() != 1) throw ShapeError("backward: loss must be scalar");
  grad_buf(scalar_loss)[0] += 1.0;
  for (int32_t i = scalar_loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.back && n.grad.numel() != 0) n.back(*this);
  }
}

Var Tape::conv2d(Var input, Var weight, Var bias, int stride, int pad) {
  const Tensor& x = val(input);
  const Tensor& w = val(weight);
  const Tensor& b = val(bias);
  require(x.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d: weight must be rank 4, got " + shape_str(w.shape()));
  require(b.rank() == 1, "conv2d: bias must be rank 1, got " + shape_str(b.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == C, "conv2d: weight channel axis " + std::to_string(w.dim(1)) +
                             " != input channel axis " + std::to_string(C));
  require(b.dim(0) == K, "conv2d: bias axis 0 " + std::to_string(b.dim(0)) +
                             " != weight output axis " + std::to_string(K));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: pad must be >= 0");
  require(kh <= H + 2 * pad, "conv2d: kernel height axis exceeds padded input height axis");
  require(kw <= W + 2 * pad, "conv2d: kernel width axis exceeds padded input width axis");
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  const int64_t ckk = C * kh * kw;
  const int64_t ohw = OH * OW;

  Tensor out({N, K, OH, OW});
  {
    CMapRM wm(w.data(), K, ckk);
    parallel_for(N, [&](int64_t n) {
      std::vector<double> col(static_cast<size_t>(ckk * ohw));
      im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
      CMapRM cm(col.data(), ckk, ohw);
      MapRM om(out.data() + n * K * ohw, K, ohw);
      om.noalias() = wm * cm;
      for (int64_t k = 0; k < K; ++k) om.row(k).array() += b[k];
    });
  }

  const bool rg = requires_grad(input) || requires_grad(weight) || requires_grad(bias);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool need_dx = requires_grad(input);
  const bool need_dw = requires_grad(weight);
  const bool need_db = requires_grad(bias);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    const Tensor& xv = t.val(input);
    const Tensor& wv = t.val(weight);
    if (need_dx) {
      Tensor& gx = t.grad_buf(input);
      CMapRM wm(wv.data(), K, ckk);
      parallel_for(N, [&](int64_t n) {
        std::vector<double> dcol(static_cast<size_t>(ckk * ohw));
        MapRM dcm(dcol.data(), ckk, ohw);
        CMapRM gom(go.data() + n * K * ohw, K, ohw);
        dcm.noalias() = wm.transpose() * gom;
        col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                   gx.data() + n * C * H * W);
      });
    }
    if (need_dw || need_db) {
      // Fixed-size image chunks with a serial chunk-order reduction keep the
      // result bitwise identical for any worker count.
      const int64_t chunk = 8;
      const int64_t n_chunks = (N + chunk - 1) / chunk;
      std::vector<std::vector<double>> wparts;
      std::vector<std::vector<double>> bparts;
      if (need_dw) wparts.assign(static_cast<size_t>(n_chunks),
                                 std::vector<double>(static_cast<size_t>(K * ckk), 0.0));
      if (need_db) bparts.assign(static_cast<size_t>(n_chunks),
                                 std::vector<double>(static_cast<size_t>(K), 0.0));
      parallel_for(n_chunks, [&](int64_t ci) {
        std::vector<double> col(static_cast<size_t>(ckk * ohw));
        const int64_t lo = ci * chunk, hi = std::min(N, lo + chunk);
        for (int64_t n = lo; n < hi; ++n) {
          CMapRM gom(go.data() + n * K * ohw, K, ohw);
          if (need_dw) {
            im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
            CMapRM cm(col.data(), ckk, ohw);
            MapRM wp(wparts[static_cast<size_t>(ci)].data(), K, ckk);
            wp.noalias() += gom * cm.transpose();
          }
          if (need_db) {
            double* bp = bparts[static_cast<size_t>(ci)].data();
            for (int64_t k = 0; k < K; ++k) bp[k] += gom.row(k).sum();
          }
        }
      });
      if (need_dw) {
        Tensor& gw = t.grad_buf(weight);
        for (int64_t ci = 0; ci < n_chunks; ++ci) {
          const double* wp = wparts[static_cast<size_t>(ci)].data();
          for (int64_t i = 0; i < K * ckk; ++i) gw[i] += wp[i];
        }
      }
      if (need_db) {
        Tensor& gb = t.grad_buf(bias);
        for (int64_t ci = 0; ci < n_chunks; ++ci) {
          const double* bp = bparts[static_cast<size_t>(ci)].data();
          for (int64_t k = 0; k < K; ++k) gb[k] += bp[k];
        }
      }
    }
  };
  return out_var;
}

Var Tape::maxpool2d(Var input, int k, int stride) {
  const Tensor& x = val(input);
  require(x.rank() == 4, "maxpool2d: input must be rank 4, got " + shape_str(x.shape()));
  require(k >= 1 && stride >= 1, "maxpool2d: k and stride must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(k <= H, "maxpool2d: window exceeds input height axis");
  require(k <= W, "maxpool2d: window exceeds input width axis");
  const int64_t OH = (H - k) / stride + 1;
  const int64_t OW = (W - k) / stride + 1;
  Tensor out({N, C, OH, OW});
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OH * OW));
  parallel_for(N * C, [&](int64_t nc) {
    const double* plane = x.data() + nc * H * W;
    double* op = out.data() + nc * OH * OW;
    int64_t* ap = arg->data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      for (int64_t ox = 0; ox < OW; ++ox) {
        int64_t best = -1;
        double bv = 0.0;
        for (int64_t i = 0; i < k; ++i) {
          for (int64_t j = 0; j < k; ++j) {
            const int64_t idx = (oy * stride + i) * W + ox * stride + j;
            if (best < 0 || plane[idx] > bv) {
              best = idx;
              bv = plane[idx];
            }
          }
        }
        op[oy * OW + ox] = bv;
        ap[oy * OW + ox] = nc * H * W + best;
      }
    }
  });
  const bool rg = requires_grad(input);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      Tensor& gx = t.grad_buf(input);
      const auto& a = *arg;
      for (int64_t i = 0; i < go.numel(); ++i) gx[a[static_cast<size_t>(i)]] += go[i];
    };
  }
  return out_var;
}

Var Tape::adaptive_maxpool2d(Var input, int out_h, int out_w) {
  const Tensor& x = val(input);
  require(x.rank() == 4, "adaptive_maxpool2d: input must be rank 4, got " + shape_str(x.shape()));
  require(out_h >= 1 && out_w >= 1, "adaptive_maxpool2d: output extents must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(out_h <= H, "adaptive_maxpool2d: output height axis exceeds input height axis");
  require(out_w <= W, "adaptive_maxpool2d: output width axis exceeds input width axis");
  const int64_t OH = out_h, OW = out_w;
  Tensor out({N, C, OH, OW});
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OH * OW));
  parallel_for(N * C, [&](int64_t nc) {
    const double* plane = x.data() + nc * H * W;
    double* op = out.data() + nc * OH * OW;
    int64_t* ap = arg->data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      const int64_t y0 = oy * H / OH;
      const int64_t y1 = ((oy + 1) * H + OH - 1) / OH;
      for (int64_t ox = 0; ox < OW; ++ox) {
        const int64_t x0 = ox * W / OW;
        const int64_t x1 = ((ox + 1) * W + OW - 1) / OW;
        int64_t best = -1;
        double bv = 0.0;
        for (int64_t iy = y0; iy < y1; ++iy) {
          for (int64_t ix = x0; ix < x1; ++ix) {
            const int64_t idx = iy * W + ix;
            if (best < 0 || plane[idx] > bv) {
              best = idx;
              bv = plane[idx];
            }
          }
        }
        op[oy * OW + ox] = bv;
        ap[oy * OW + ox] = nc * H * W + best;
      }
    }
  });
  const bool rg = requires_grad(input);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      Tensor& gx = t.grad_buf(input);
      const auto& a = *arg;
      for (int64_t i = 0; i < go.numel(); ++i) gx[a[static_cast<size_t>(i)]] += go[i];
    };
  }
  return out_var;
}

Var Tape::linear(Var input, Var weight, Var bias) {
  const Tensor& x = val(input);
  const Tensor& w = val(weight);
  const Tensor& b = val(bias);
  require(x.rank() == 2, "linear: input must be rank 2, got " + shape_str(x.shape()));
  require(w.rank() == 2, "linear: weight must be rank 2, got " + shape_str(w.shape()));
  require(b.rank() == 1, "linear: bias must be rank 1, got " + shape_str(b.shape()));
  const int64_t N = x.dim(0), D = x.dim(1), M = w.dim(1);
  require(w.dim(0) == D, "linear: weight axis 0 " + std::to_string(w.dim(0)) +
                             " != input axis 1 " + std::to_string(D));
  require(b.dim(0) == M, "linear: bias axis 0 " + std::to_string(b.dim(0)) +
                             " != weight axis 1 " + std::to_string(M));
  Tensor out({N, M});
  {
    CMapRM xm(x.data(), N, D), wm(w.data(), D, M);
    MapRM om(out.data(), N, M);
    // Row-at-a-time products keep each image's result independent of its
    // batch neighbors (bitwise), whatever the batch size.
    for (int64_t n = 0; n < N; ++n) om.row(n).noalias() = xm.row(n) * wm;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t m = 0; m < M; ++m) out.at(n, m) += b[m];
  }
  const bool rg = requires_grad(input) || requires_grad(weight) || requires_grad(bias);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool need_dx = requires_grad(input);
  const bool need_dw = requires_grad(weight);
  const bool need_db = requires_grad(bias);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    CMapRM gom(go.data(), N, M);
    if (need_dx) {
      const Tensor& wv = t.val(weight);
      CMapRM wm(wv.data(), D, M);
      MapRM gxm(t.grad_buf(input).data(), N, D);
      // Row-at-a-time for the same per-image independence as the forward.
      for (int64_t n = 0; n < N; ++n)
        gxm.row(n).noalias() += gom.row(n) * wm.transpose();
    }
    if (need_dw) {
      const Tensor& xv = t.val(input);
      CMapRM xm(xv.data(), N, D);
      MapRM gwm(t.grad_buf(weight).data(), D, M);
      gwm.noalias() += xm.transpose() * gom;
    }
    if (need_db) {
      Tensor& gb = t.grad_buf(bias);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t m = 0; m < M; ++m) gb[m] += go.at(n, m);
    }
  };
  return out_var;
}

Var Tape::relu(Var x) {
  const Tensor& xv = val(x);
  Tensor out(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const bool rg = requires_grad(x);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      const Tensor& v = t.val(x);
      Tensor& gx = t.grad_buf(x);
      for (int64_t i = 0; i < go.numel(); ++i)
        if (v[i] > 0.0) gx[i] += go[i];
    };
  }
  return out_var;
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  require(av.same_shape(bv), "add: shape " + shape_str(av.shape()) + " != " + shape_str(bv.shape()));
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool ga = requires_grad(a), gb = requires_grad(b);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    if (ga) {
      Tensor& g = t.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i];
    }
    if (gb) {
      Tensor& g = t.grad_buf(b);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i];
    }
  };
  return out_var;
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  require(av.same_shape(bv), "mul: shape " + shape_str(av.shape()) + " != " + shape_str(bv.shape()));
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool ga = requires_grad(a), gb = requires_grad(b);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    if (ga) {
      const Tensor& other = t.val(b);
      Tensor& g = t.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i] * other[i];
    }
    if (gb) {
      const Tensor& other = t.val(a);
      Tensor& g = t.grad_buf(b);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i] * other[i];
    }
  };
  return out_var;
}

Var Tape::scalar_mul(Var a, double c) {
  const Tensor& av = val(a);
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * c;
  const bool rg = requires_grad(a);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      Tensor& g = t.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i] * c;
    };
  }
  return out_var;
}

Var Tape::scalar_add(Var a, double c) {
  const Tensor& av = val(a);
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + c;
  const bool rg = requires_grad(a);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      Tensor& g = t.grad_buf(a);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i];
    };
  }
  return out_var;
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
  const Tensor& xv = val(x);
  Tensor out = xv.reshaped(std::move(shape));
  const bool rg = requires_grad(x);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      Tensor& g = t.grad_buf(x);
      for (int64_t i = 0; i < go.numel(); ++i) g[i] += go[i];
    };
  }
  return out_var;
}

Var Tape::concat(const std::vector<Var>& xs, int axis) {
  require(!xs.empty(), "concat: needs at least one tensor");
  const Tensor& first = val(xs[0]);
  const int r = first.rank();
  require(axis >= 0 && axis < r, "concat: axis out of range");
  std::vector<int64_t> out_shape = first.shape();
  int64_t axis_total = first.dim(axis);
  for (size_t i = 1; i < xs.size(); ++i) {
    const Tensor& tv = val(xs[i]);
    require(tv.rank() == r, "concat: rank mismatch at input " + std::to_string(i));
    for (int a = 0; a < r; ++a) {
      if (a == axis) continue;
      require(tv.dim(a) == first.dim(a),
              "concat: axis " + std::to_string(a) + " mismatch at input " + std::to_string(i));
    }
    axis_total += tv.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= first.dim(a);
  for (int a = axis + 1; a < r; ++a) inner *= first.dim(a);

  Tensor out(out_shape);
  std::vector<int64_t> offsets(xs.size());
  {
    int64_t off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      offsets[i] = off;
      const Tensor& tv = val(xs[i]);
      const int64_t len = tv.dim(axis) * inner;
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + (o * axis_total + off) * inner, tv.data() + o * len,
                    static_cast<size_t>(len) * sizeof(double));
      off += tv.dim(axis);
    }
  }
  bool rg = false;
  for (Var v : xs) rg = rg || requires_grad(v);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  std::vector<Var> parts = xs;
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    for (size_t i = 0; i < parts.size(); ++i) {
      if (!t.requires_grad(parts[i])) continue;
      const int64_t w = t.val(parts[i]).dim(axis);
      Tensor& g = t.grad_buf(parts[i]);
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = go.data() + (o * axis_total + offsets[i]) * inner;
        double* dst = g.data() + o * w * inner;
        for (int64_t j = 0; j < w * inner; ++j) dst[j] += src[j];
      }
    }
  };
  return out_var;
}

Var Tape::reduce_sum(Var x) {
  const Tensor& xv = val(x);
  double s = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
  const bool rg = requires_grad(x);
  Var out_var = emit(Tensor::scalar(s), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const double go = t.node(out_var).grad[0];
      Tensor& g = t.grad_buf(x);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
    };
  }
  return out_var;
}

Var Tape::reduce_mean(Var x) {
  const Tensor& xv = val(x);
  require(xv.numel() > 0, "reduce_mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(xv.numel());
  double s = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
  const bool rg = requires_grad(x);
  Var out_var = emit(Tensor::scalar(s * inv), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const double go = t.node(out_var).grad[0] * inv;
      Tensor& g = t.grad_buf(x);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
    };
  }
  return out_var;
}

Var Tape::channel_affine(Var x, const std::vector<double>& scale,
                         const std::vector<double>& shift) {
  const Tensor& xv = val(x);
  require(xv.rank() == 4, "channel_affine: input must be rank 4, got " + shape_str(xv.shape()));
  const int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  require(static_cast<int64_t>(scale.size()) == C,
          "channel_affine: scale size != channel axis");
  require(static_cast<int64_t>(shift.size()) == C,
          "channel_affine: shift size != channel axis");
  Tensor out(xv.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double sc = scale[static_cast<size_t>(c)], sh = shift[static_cast<size_t>(c)];
      const double* src = xv.data() + (n * C + c) * HW;
      double* dst = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] * sc + sh;
    }
  const bool rg = requires_grad(x);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    std::vector<double> sc = scale;
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      Tensor& g = t.grad_buf(x);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const double s = sc[static_cast<size_t>(c)];
          const double* src = go.data() + (n * C + c) * HW;
          double* dst = g.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) dst[i] += src[i] * s;
        }
    };
  }
  return out_var;
}

Var Tape::softmax(Var x, int axis) {
  const Tensor& xv = val(x);
  const int r = xv.rank();
  require(r >= 1, "softmax: input must have rank >= 1");
  require(axis >= 0 && axis < r, "softmax: axis out of range");
  const int64_t L = xv.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= xv.dim(a);
  for (int a = axis + 1; a < r; ++a) inner *= xv.dim(a);
  for (int64_t i = 0; i < xv.numel(); ++i)
    if (std::isnan(xv[i])) throw NumericError("softmax: NaN input");
  Tensor out(xv.shape());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * L * inner + in;
      double m = xv[base];
      for (int64_t l = 1; l < L; ++l) m = std::max(m, xv[base + l * inner]);
      double s = 0.0;
      for (int64_t l = 0; l < L; ++l) {
        const double e = std::exp(xv[base + l * inner] - m);
        out[base + l * inner] = e;
        s += e;
      }
      const double invs = 1.0 / s;
      for (int64_t l = 0; l < L; ++l) out[base + l * inner] *= invs;
    }
  const bool rg = requires_grad(x);
  Var out_var = emit(std::move(out), rg, {});
  if (rg) {
    node(out_var).back = [=](Tape& t) {
      const Tensor& go = t.node(out_var).grad;
      const Tensor& y = t.val(out_var);
      Tensor& g = t.grad_buf(x);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * L * inner + in;
          double dot = 0.0;
          for (int64_t l = 0; l < L; ++l) dot += go[base + l * inner] * y[base + l * inner];
          for (int64_t l = 0; l < L; ++l)
            g[base + l * inner] += y[base + l * inner] * (go[base + l * inner] - dot);
        }
    };
  }
  return out_var;
}

Var Tape::cross_entropy(Var probs, const std::vector<int>& labels) {
  const Tensor& p = val(probs);
  require(p.rank() == 2, "cross_entropy: probs must be rank 2, got " + shape_str(p.shape()));
  const int64_t N = p.dim(0), T = p.dim(1);
  require(static_cast<int64_t>(labels.size()) == N,
          "cross_entropy: labels size != batch axis");
  for (int64_t n = 0; n < N; ++n) {
    const int y = labels[static_cast<size_t>(n)];
    if (y < 0 || y >= T)
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(T) + ")");
    double s = 0.0;
    for (int64_t t = 0; t < T; ++t) s += p.at(n, t);
    if (std::abs(s - 1.0) > 1e-6)
      throw NumericError("cross_entropy: probs row " + std::to_string(n) +
                         " sums to " + std::to_string(s) + ", expected 1");
  }
  constexpr double kClamp = 1e-12;
  double loss = 0.0;
  for (int64_t n = 0; n < N; ++n)
    loss -= std::log(std::max(p.at(n, labels[static_cast<size_t>(n)]), kClamp));
  loss /= static_cast<double>(N);
  const bool rg = requires_grad(probs);
  Var out_var = emit(Tensor::scalar(loss), rg, {});
  if (rg) {
    std::vector<int> ls = labels;
    node(out_var).back = [=](Tape& t) {
      const double go = t.node(out_var).grad[0];
      const Tensor& pv = t.val(probs);
      Tensor& g = t.grad_buf(probs);
      const double invn = 1.0 / static_cast<double>(N);
      for (int64_t n = 0; n < N; ++n) {
        const double pi = pv.at(n, ls[static_cast<size_t>(n)]);
        if (pi >= kClamp) g.at(n, ls[static_cast<size_t>(n)]) -= go * invn / pi;
      }
    };
  }
  return out_var;
}

Var Tape::batchnorm2d(Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                      bool training, double momentum, double eps) {
  const Tensor& xv = val(x);
  const Tensor& gv = val(gamma);
  const Tensor& bv = val(beta);
  require(xv.rank() == 4, "batchnorm2d: input must be rank 4, got " + shape_str(xv.shape()));
  const int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  require(gv.rank() == 1 && gv.dim(0) == C, "batchnorm2d: gamma axis 0 != channel axis");
  require(bv.rank() == 1 && bv.dim(0) == C, "batchnorm2d: beta axis 0 != channel axis");
  require(running_mean && running_mean->numel() == C,
          "batchnorm2d: running_mean size != channel axis");
  require(running_var && running_var->numel() == C,
          "batchnorm2d: running_var size != channel axis");
  const int64_t M = N * HW;
  require(!training || M >= 1, "batchnorm2d: empty batch");

  std::vector<double> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* src = xv.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += src[i];
      }
      const double mu = s / static_cast<double>(M);
      double v = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* src = xv.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const double d = src[i] - mu;
          v += d * d;
        }
      }
      v /= static_cast<double>(M);
      mean[static_cast<size_t>(c)] = mu;
      var[static_cast<size_t>(c)] = v;
      const double unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
      (*running_mean)[c] = (1.0 - momentum) * (*running_mean)[c] + momentum * mu;
      (*running_var)[c] = (1.0 - momentum) * (*running_var)[c] + momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = (*running_mean)[c];
      var[static_cast<size_t>(c)] = (*running_var)[c];
    }
  }

  Tensor out(xv.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double mu = mean[static_cast<size_t>(c)];
      const double istd = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
      const double ga = gv[c], be = bv[c];
      const double* src = xv.data() + (n * C + c) * HW;
      double* dst = out.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) dst[i] = (src[i] - mu) * istd * ga + be;
    }

  const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool need_dx = requires_grad(x);
  const bool need_dg = requires_grad(gamma);
  const bool need_db = requires_grad(beta);
  auto mean_s = std::make_shared<std::vector<double>>(std::move(mean));
  auto var_s = std::make_shared<std::vector<double>>(std::move(var));
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    const Tensor& xin = t.val(x);
    const Tensor& gam = t.val(gamma);
    const auto& mu = *mean_s;
    const auto& vr = *var_s;
    for (int64_t c = 0; c < C; ++c) {
      const double m0 = mu[static_cast<size_t>(c)];
      const double istd = 1.0 / std::sqrt(vr[static_cast<size_t>(c)] + eps);
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* dyp = go.data() + (n * C + c) * HW;
        const double* xp = xin.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          sum_dy += dyp[i];
          sum_dy_xhat += dyp[i] * (xp[i] - m0) * istd;
        }
      }
      if (need_dg) t.grad_buf(gamma)[c] += sum_dy_xhat;
      if (need_db) t.grad_buf(beta)[c] += sum_dy;
      if (need_dx) {
        Tensor& gx = t.grad_buf(x);
        const double g0 = gam[c];
        if (training) {
          const double invm = 1.0 / static_cast<double>(M);
          for (int64_t n = 0; n < N; ++n) {
            const double* dyp = go.data() + (n * C + c) * HW;
            const double* xp = xin.data() + (n * C + c) * HW;
            double* gp = gx.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              const double xhat = (xp[i] - m0) * istd;
              gp[i] += g0 * istd * (dyp[i] - invm * sum_dy - invm * xhat * sum_dy_xhat);
            }
          }
        } else {
          for (int64_t n = 0; n < N; ++n) {
            const double* dyp = go.data() + (n * C + c) * HW;
            double* gp = gx.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) gp[i] += dyp[i] * g0 * istd;
          }
        }
      }
    }
  };
  return out_var;
}

Var Tape::attention_scores_dp(Var feat, Var g) {
  const Tensor& f = val(feat);
  const Tensor& gv = val(g);
  require(f.rank() == 4, "attention_scores_dp: feat must be rank 4, got " + shape_str(f.shape()));
  require(gv.rank() == 2, "attention_scores_dp: g must be rank 2, got " + shape_str(gv.shape()));
  const int64_t N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
  require(gv.dim(0) == N, "attention_scores_dp: batch axes differ");
  require(gv.dim(1) == C, "attention_scores_dp: g axis 1 " + std::to_string(gv.dim(1)) +
                              " != feature channel axis " + std::to_string(C));
  Tensor out({N, HW});
  for (int64_t n = 0; n < N; ++n) {
    double* op = out.data() + n * HW;
    std::fill(op, op + HW, 0.0);
    for (int64_t c = 0; c < C; ++c) {
      const double gc = gv.at(n, c);
      const double* fp = f.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) op[i] += fp[i] * gc;
    }
  }
  const bool rg = requires_grad(feat) || requires_grad(g);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool df = requires_grad(feat), dg = requires_grad(g);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    const Tensor& fv = t.val(feat);
    const Tensor& gvv = t.val(g);
    for (int64_t n = 0; n < N; ++n) {
      const double* gop = go.data() + n * HW;
      for (int64_t c = 0; c < C; ++c) {
        const double* fp = fv.data() + (n * C + c) * HW;
        if (df) {
          double* gf = t.grad_buf(feat).data() + (n * C + c) * HW;
          const double gc = gvv.at(n, c);
          for (int64_t i = 0; i < HW; ++i) gf[i] += gop[i] * gc;
        }
        if (dg) {
          double s = 0.0;
          for (int64_t i = 0; i < HW; ++i) s += gop[i] * fp[i];
          t.grad_buf(g).at(n, c) += s;
        }
      }
    }
  };
  return out_var;
}

Var Tape::attention_scores_pc(Var feat, Var g, Var u) {
  const Tensor& f = val(feat);
  const Tensor& gv = val(g);
  const Tensor& uv = val(u);
  require(f.rank() == 4, "attention_scores_pc: feat must be rank 4, got " + shape_str(f.shape()));
  require(gv.rank() == 2, "attention_scores_pc: g must be rank 2, got " + shape_str(gv.shape()));
  require(uv.rank() == 1, "attention_scores_pc: u must be rank 1, got " + shape_str(uv.shape()));
  const int64_t N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
  require(gv.dim(0) == N, "attention_scores_pc: batch axes differ");
  require(gv.dim(1) == C, "attention_scores_pc: g axis 1 != feature channel axis");
  require(uv.dim(0) == C, "attention_scores_pc: u axis 0 " + std::to_string(uv.dim(0)) +
                              " != feature channel axis " + std::to_string(C));
  Tensor out({N, HW});
  for (int64_t n = 0; n < N; ++n) {
    double ug = 0.0;
    for (int64_t c = 0; c < C; ++c) ug += uv[c] * gv.at(n, c);
    double* op = out.data() + n * HW;
    std::fill(op, op + HW, ug);
    for (int64_t c = 0; c < C; ++c) {
      const double uc = uv[c];
      const double* fp = f.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) op[i] += uc * fp[i];
    }
  }
  const bool rg = requires_grad(feat) || requires_grad(g) || requires_grad(u);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool df = requires_grad(feat), dg = requires_grad(g), du = requires_grad(u);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    const Tensor& fv = t.val(feat);
    const Tensor& gvv = t.val(g);
    const Tensor& uvv = t.val(u);
    for (int64_t n = 0; n < N; ++n) {
      const double* gop = go.data() + n * HW;
      double gsum = 0.0;
      for (int64_t i = 0; i < HW; ++i) gsum += gop[i];
      for (int64_t c = 0; c < C; ++c) {
        const double uc = uvv[c];
        const double* fp = fv.data() + (n * C + c) * HW;
        if (df) {
          double* gf = t.grad_buf(feat).data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) gf[i] += gop[i] * uc;
        }
        if (dg) t.grad_buf(g).at(n, c) += uc * gsum;
        if (du) {
          double s = gsum * gvv.at(n, c);
          for (int64_t i = 0; i < HW; ++i) s += gop[i] * fp[i];
          t.grad_buf(u)[c] += s;
        }
      }
    }
  };
  return out_var;
}

Var Tape::attend(Var feat, Var a) {
  const Tensor& f = val(feat);
  const Tensor& av = val(a);
  require(f.rank() == 4, "attend: feat must be rank 4, got " + shape_str(f.shape()));
  require(av.rank() == 2, "attend: weights must be rank 2, got " + shape_str(av.shape()));
  const int64_t N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
  require(av.dim(0) == N, "attend: batch axes differ");
  require(av.dim(1) == HW, "attend: weight axis 1 " + std::to_string(av.dim(1)) +
                               " != spatial size " + std::to_string(HW));
  Tensor out({N, C});
  for (int64_t n = 0; n < N; ++n) {
    const double* ap = av.data() + n * HW;
    for (int64_t c = 0; c < C; ++c) {
      const double* fp = f.data() + (n * C + c) * HW;
      double s = 0.0;
      for (int64_t i = 0; i < HW; ++i) s += ap[i] * fp[i];
      out.at(n, c) = s;
    }
  }
  const bool rg = requires_grad(feat) || requires_grad(a);
  Var out_var = emit(std::move(out), rg, {});
  if (!rg) return out_var;
  const bool df = requires_grad(feat), da = requires_grad(a);
  node(out_var).back = [=](Tape& t) {
    const Tensor& go = t.node(out_var).grad;
    const Tensor& fv = t.val(feat);
    const Tensor& avv = t.val(a);
    for (int64_t n = 0; n < N; ++n) {
      const double* ap = avv.data() + n * HW;
      for (int64_t c = 0; c < C; ++c) {
        const double gc = go.at(n, c);
        const double* fp = fv.data() + (n * C + c) * HW;
        if (df) {
          double* gf = t.grad_buf(feat).data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) gf[i] += gc * ap[i];
        }
        if (da) {
          double* ga = t.grad_buf(a).data() + n * HW;
          for (int64_t i = 0; i < HW; ++i) ga[i] += gc * fp[i];
        }
      }
    }
  };
  return out_var;
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h,
                  int64_t max_coords, uint64_t seed) {
  Tensor analytic;
  {
    Tape t;
    Var vx = t.input(x, true);
    Var out = f(t, vx);
    if (t.val(out).numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    t.backward(out);
    analytic = t.grad(vx);
  }
  auto eval = [&](const Tensor& xp) {
    Tape t;
    Var vx = t.input(xp, false);
    Var out = f(t, vx);
    return t.val(out).item();
  };
  std::vector<int64_t> coords;
  if (max_coords > 0 && x.numel() > max_coords) {
    Rng rng(seed);
    std::vector<int64_t> all(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) all[static_cast<size_t>(i)] = i;
    rng.shuffle(all);
    coords.assign(all.begin(), all.begin() + static_cast<size_t>(max_coords));
  } else {
    coords.resize(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) coords[static_cast<size_t>(i)] = i;
  }
  double worst = 0.0;
  Tensor xp = x;
  for (int64_t i : coords) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = eval(xp);
    xp[i] = orig - h;
    const double fm = eval(xp);
    xp[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace attnet
