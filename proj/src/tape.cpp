#include "mdf/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mdf {

namespace {

int ceil_div(int a, int b) {  // b > 0
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
int floor_div(int a, int b) {  // b > 0
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

// y[b,o,oy,ox] += sum_{i,ky,kx} x[b,i,oy*s-p+ky,ox*s-p+kx] * k[o,i,ky,kx]
void conv2d_accum(const Tensor& x, const Tensor& k, int s, int p, Tensor& y) {
  const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int Ho = y.shape[2], Wo = y.shape[3];
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < Co; ++o)
      for (int i = 0; i < Ci; ++i)
        for (int ky = 0; ky < kh; ++ky) {
          const int oy_lo = std::max(0, ceil_div(p - ky, s));
          const int oy_hi = std::min(Ho - 1, floor_div(H - 1 + p - ky, s));
          for (int kx = 0; kx < kw; ++kx) {
            const int ox_lo = std::max(0, ceil_div(p - kx, s));
            const int ox_hi = std::min(Wo - 1, floor_div(W - 1 + p - kx, s));
            const double kv = k.data[((static_cast<size_t>(o) * Ci + i) * kh + ky) * kw + kx];
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
              const int iy = oy * s - p + ky;
              const double* xrow = &x.data[((static_cast<size_t>(b) * Ci + i) * H + iy) * W];
              double* yrow = &y.data[((static_cast<size_t>(b) * Co + o) * Ho + oy) * Wo];
              int ix = ox_lo * s - p + kx;
              for (int ox = ox_lo; ox <= ox_hi; ++ox, ix += s) yrow[ox] += xrow[ix] * kv;
            }
          }
        }
}

// gx[b,i,oy*s-p+ky,ox*s-p+kx] += gy[b,o,oy,ox] * k[o,i,ky,kx]
void conv2d_accum_input_grad(const Tensor& gy, const Tensor& k, int s, int p, Tensor& gx) {
  const int B = gx.shape[0], Ci = gx.shape[1], H = gx.shape[2], W = gx.shape[3];
  const int Co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int Ho = gy.shape[2], Wo = gy.shape[3];
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < Co; ++o)
      for (int i = 0; i < Ci; ++i)
        for (int ky = 0; ky < kh; ++ky) {
          const int oy_lo = std::max(0, ceil_div(p - ky, s));
          const int oy_hi = std::min(Ho - 1, floor_div(H - 1 + p - ky, s));
          for (int kx = 0; kx < kw; ++kx) {
            const int ox_lo = std::max(0, ceil_div(p - kx, s));
            const int ox_hi = std::min(Wo - 1, floor_div(W - 1 + p - kx, s));
            const double kv = k.data[((static_cast<size_t>(o) * Ci + i) * kh + ky) * kw + kx];
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
              const int iy = oy * s - p + ky;
              double* gxrow = &gx.data[((static_cast<size_t>(b) * Ci + i) * H + iy) * W];
              const double* gyrow = &gy.data[((static_cast<size_t>(b) * Co + o) * Ho + oy) * Wo];
              int ix = ox_lo * s - p + kx;
              for (int ox = ox_lo; ox <= ox_hi; ++ox, ix += s) gxrow[ix] += gyrow[ox] * kv;
            }
          }
        }
}

// gk[o,i,ky,kx] += sum_{b,oy,ox} gy[b,o,oy,ox] * x[b,i,oy*s-p+ky,ox*s-p+kx]
void conv2d_accum_kernel_grad(const Tensor& gy, const Tensor& x, int s, int p, Tensor& gk) {
  const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = gk.shape[0], kh = gk.shape[2], kw = gk.shape[3];
  const int Ho = gy.shape[2], Wo = gy.shape[3];
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < Co; ++o)
      for (int i = 0; i < Ci; ++i)
        for (int ky = 0; ky < kh; ++ky) {
          const int oy_lo = std::max(0, ceil_div(p - ky, s));
          const int oy_hi = std::min(Ho - 1, floor_div(H - 1 + p - ky, s));
          for (int kx = 0; kx < kw; ++kx) {
            const int ox_lo = std::max(0, ceil_div(p - kx, s));
            const int ox_hi = std::min(Wo - 1, floor_div(W - 1 + p - kx, s));
            double acc = 0.0;
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
              const int iy = oy * s - p + ky;
              const double* xrow = &x.data[((static_cast<size_t>(b) * Ci + i) * H + iy) * W];
              const double* gyrow = &gy.data[((static_cast<size_t>(b) * Co + o) * Ho + oy) * Wo];
              int ix = ox_lo * s - p + kx;
              for (int ox = ox_lo; ox <= ox_hi; ++ox, ix += s) acc += gyrow[ox] * xrow[ix];
            }
            gk.data[((static_cast<size_t>(o) * Ci + i) * kh + ky) * kw + kx] += acc;
          }
        }
}

// y[b,o,iy*s-p+ky,ix*s-p+kx] += x[b,i,iy,ix] * k[i,o,ky,kx]
void deconv2d_accum(const Tensor& x, const Tensor& k, int s, int p, Tensor& y) {
  const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = k.shape[1], kh = k.shape[2], kw = k.shape[3];
  const int Ho = y.shape[2], Wo = y.shape[3];
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Ci; ++i)
      for (int o = 0; o < Co; ++o)
        for (int ky = 0; ky < kh; ++ky) {
          const int iy_lo = std::max(0, ceil_div(p - ky, s));
          const int iy_hi = std::min(H - 1, floor_div(Ho - 1 + p - ky, s));
          for (int kx = 0; kx < kw; ++kx) {
            const int ix_lo = std::max(0, ceil_div(p - kx, s));
            const int ix_hi = std::min(W - 1, floor_div(Wo - 1 + p - kx, s));
            const double kv = k.data[((static_cast<size_t>(i) * Co + o) * kh + ky) * kw + kx];
            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
              const int oy = iy * s - p + ky;
              const double* xrow = &x.data[((static_cast<size_t>(b) * Ci + i) * H + iy) * W];
              double* yrow = &y.data[((static_cast<size_t>(b) * Co + o) * Ho + oy) * Wo];
              int ox = ix_lo * s - p + kx;
              for (int ix = ix_lo; ix <= ix_hi; ++ix, ox += s) yrow[ox] += xrow[ix] * kv;
            }
          }
        }
}

// gx[b,i,iy,ix] += gy[b,o,iy*s-p+ky,ix*s-p+kx] * k[i,o,ky,kx]
void deconv2d_accum_input_grad(const Tensor& gy, const Tensor& k, int s, int p, Tensor& gx) {
  const int B = gx.shape[0], Ci = gx.shape[1], H = gx.shape[2], W = gx.shape[3];
  const int Co = k.shape[1], kh = k.shape[2], kw = k.shape[3];
  const int Ho = gy.shape[2], Wo = gy.shape[3];
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Ci; ++i)
      for (int o = 0; o < Co; ++o)
        for (int ky = 0; ky < kh; ++ky) {
          const int iy_lo = std::max(0, ceil_div(p - ky, s));
          const int iy_hi = std::min(H - 1, floor_div(Ho - 1 + p - ky, s));
          for (int kx = 0; kx < kw; ++kx) {
            const int ix_lo = std::max(0, ceil_div(p - kx, s));
            const int ix_hi = std::min(W - 1, floor_div(Wo - 1 + p - kx, s));
            const double kv = k.data[((static_cast<size_t>(i) * Co + o) * kh + ky) * kw + kx];
            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
              const int oy = iy * s - p + ky;
              double* gxrow = &gx.data[((static_cast<size_t>(b) * Ci + i) * H + iy) * W];
              const double* gyrow = &gy.data[((static_cast<size_t>(b) * Co + o) * Ho + oy) * Wo];
              int ox = ix_lo * s - p + kx;
              for (int ix = ix_lo; ix <= ix_hi; ++ix, ox += s) gxrow[ix] += gyrow[ox] * kv;
            }
          }
        }
}

// gk[i,o,ky,kx] += sum_{b,iy,ix} x[b,i,iy,ix] * gy[b,o,iy*s-p+ky,ix*s-p+kx]
void deconv2d_accum_kernel_grad(const Tensor& gy, const Tensor& x, int s, int p, Tensor& gk) {
  const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = gk.shape[1], kh = gk.shape[2], kw = gk.shape[3];
  const int Ho = gy.shape[2], Wo = gy.shape[3];
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Ci; ++i)
      for (int o = 0; o < Co; ++o)
        for (int ky = 0; ky < kh; ++ky) {
          const int iy_lo = std::max(0, ceil_div(p - ky, s));
          const int iy_hi = std::min(H - 1, floor_div(Ho - 1 + p - ky, s));
          for (int kx = 0; kx < kw; ++kx) {
            const int ix_lo = std::max(0, ceil_div(p - kx, s));
            const int ix_hi = std::min(W - 1, floor_div(Wo - 1 + p - kx, s));
            double acc = 0.0;
            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
              const int oy = iy * s - p + ky;
              const double* xrow = &x.data[((static_cast<size_t>(b) * Ci + i) * H + iy) * W];
              const double* gyrow = &gy.data[((static_cast<size_t>(b) * Co + o) * Ho + oy) * Wo];
              int ox = ix_lo * s - p + kx;
              for (int ix = ix_lo; ix <= ix_hi; ++ix, ox += s) acc += xrow[ix] * gyrow[ox];
            }
            gk.data[((static_cast<size_t>(i) * Co + o) * kh + ky) * kw + kx] += acc;
          }
        }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

Parameter& ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(shape);
  p->velocity = Tensor(std::move(shape));
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return *params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return *params_[it->second];
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

int64_t ParamStore::total_values() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p->grad.fill(0.0);
}

double ParamStore::grad_l2_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (double g : p->grad.data) s += g * g;
  return std::sqrt(s);
}

void ParamStore::sgd_step(double lr, double momentum, double clip) {
  double scale = 1.0;
  if (clip > 0.0) {
    double norm = grad_l2_norm();
    if (norm > clip) scale = clip / norm;
  }
  for (auto& p : params_) {
    const int64_t n = p->value.numel();
    for (int64_t i = 0; i < n; ++i) {
      double g = p->grad[i] * scale;
      double v = momentum * p->velocity[i] + g;
      p->velocity[i] = v;
      p->value[i] -= lr * v;
    }
    p->value.check_finite(("parameter " + p->name + " after sgd step").c_str());
  }
}

// ---------------------------------------------------------------------------
// Tape

void Tape::check(const Tensor& t, const char* what) const {
  if (finite_checks) t.check_finite(what);
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Tape::value(Var v) const { return node(v).val; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grd.defined()) return Tensor(n.val.shape);
  return n.grd;
}

Tensor Tape::grad_of(const Parameter& p) const {
  for (const auto& n : nodes_)
    if (n.op == Op::Param && n.p == &p) return n.grd.defined() ? n.grd : Tensor(n.val.shape);
  throw std::logic_error("parameter " + p.name + " is detached from this tape");
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grd.defined()) n.grd = Tensor(n.val.shape);
  return n.grd;
}

Var Tape::input(Tensor v) {
  check(v, "tape input");
  Node n;
  n.op = Op::Input;
  n.val = std::move(v);
  return Var{push(std::move(n))};
}

Var Tape::param(Parameter& p) {
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == Op::Param && nodes_[i].p == &p) return Var{static_cast<int>(i)};
  check(p.value, ("parameter " + p.name).c_str());
  Node n;
  n.op = Op::Param;
  n.val = p.value;
  n.p = &p;
  return Var{push(std::move(n))};
}

Var Tape::conv2d(Var x, Var kernel, int stride, int padding) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernel);
  require(xv.ndim() == 4 && kv.ndim() == 4, "conv2d expects 4-d input and kernel");
  require(stride >= 1 && padding >= 0, "conv2d stride must be >= 1, padding >= 0");
  require(xv.shape[1] == kv.shape[1],
          "conv2d channel mismatch: input " + shape_str(xv.shape) + " kernel " + shape_str(kv.shape));
  const int H = xv.shape[2], W = xv.shape[3], kh = kv.shape[2], kw = kv.shape[3];
  require(kh <= H + 2 * padding && kw <= W + 2 * padding, "conv2d kernel larger than padded input");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  Node n;
  n.op = Op::Conv2d;
  n.in = {x.id, kernel.id, -1};
  n.i0 = stride;
  n.i1 = padding;
  n.val = Tensor({xv.shape[0], kv.shape[0], Ho, Wo});
  conv2d_accum(xv, kv, stride, padding, n.val);
  check(n.val, "conv2d output");
  return Var{push(std::move(n))};
}

Var Tape::deconv2d(Var x, Var kernel, int stride, int padding) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernel);
  require(xv.ndim() == 4 && kv.ndim() == 4, "deconv2d expects 4-d input and kernel");
  require(stride >= 1 && padding >= 0, "deconv2d stride must be >= 1, padding >= 0");
  require(xv.shape[1] == kv.shape[0],
          "deconv2d channel mismatch: input " + shape_str(xv.shape) + " kernel " + shape_str(kv.shape));
  const int H = xv.shape[2], W = xv.shape[3], kh = kv.shape[2], kw = kv.shape[3];
  const int Ho = (H - 1) * stride - 2 * padding + kh;
  const int Wo = (W - 1) * stride - 2 * padding + kw;
  require(Ho > 0 && Wo > 0, "deconv2d output would be empty");
  Node n;
  n.op = Op::Deconv2d;
  n.in = {x.id, kernel.id, -1};
  n.i0 = stride;
  n.i1 = padding;
  n.val = Tensor({xv.shape[0], kv.shape[1], Ho, Wo});
  deconv2d_accum(xv, kv, stride, padding, n.val);
  check(n.val, "deconv2d output");
  return Var{push(std::move(n))};
}

Var Tape::maxpool2d(Var x, int k, int stride) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 4, "maxpool2d expects 4-d input");
  require(k >= 1 && stride >= 1, "maxpool2d window and stride must be >= 1");
  const int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  require(k <= H && k <= W, "maxpool2d window larger than input");
  const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  Node n;
  n.op = Op::MaxPool2d;
  n.in = {x.id, -1, -1};
  n.i0 = k;
  n.i1 = stride;
  n.val = Tensor({B, C, Ho, Wo});
  n.iaux.resize(static_cast<size_t>(n.val.numel()));
  size_t out = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++out) {
          double best = -1e300;
          int64_t arg = -1;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              int64_t idx = ((static_cast<int64_t>(b) * C + c) * H + oy * stride + dy) * W +
                            ox * stride + dx;
              if (xv[idx] > best) {
                best = xv[idx];
                arg = idx;
              }
            }
          n.val[static_cast<int64_t>(out)] = best;
          n.iaux[out] = arg;
        }
  return Var{push(std::move(n))};
}

Var Tape::roi_pool(Var map, int x0, int y0, int x1, int y1, int out_w, int out_h) {
  const Tensor& m = value(map);
  require(m.ndim() == 4 && m.shape[0] == 1, "roi_pool expects a [1,C,H,W] map");
  const int C = m.shape[1], H = m.shape[2], W = m.shape[3];
  require(0 <= x0 && x0 < x1 && x1 <= W && 0 <= y0 && y0 < y1 && y1 <= H,
          "roi_pool footprint outside map");
  require(out_w >= 1 && out_h >= 1, "roi_pool output size must be positive");
  const int fw = x1 - x0, fh = y1 - y0;
  Node n;
  n.op = Op::RoiPool;
  n.in = {map.id, -1, -1};
  n.val = Tensor({C, out_h, out_w});
  n.iaux.resize(static_cast<size_t>(n.val.numel()));
  size_t out = 0;
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < out_h; ++j) {
      const int ry0 = y0 + (j * fh) / out_h;
      const int ry1 = y0 + ceil_div((j + 1) * fh, out_h);
      for (int i = 0; i < out_w; ++i, ++out) {
        const int rx0 = x0 + (i * fw) / out_w;
        const int rx1 = x0 + ceil_div((i + 1) * fw, out_w);
        double best = -1e300;
        int64_t arg = -1;
        for (int y = ry0; y < ry1; ++y)
          for (int x = rx0; x < rx1; ++x) {
            int64_t idx = (static_cast<int64_t>(c) * H + y) * W + x;
            if (m[idx] > best) {
              best = m[idx];
              arg = idx;
            }
          }
        n.val[static_cast<int64_t>(out)] = best;
        n.iaux[out] = arg;
      }
    }
  return Var{push(std::move(n))};
}

Var Tape::linear(Var x, Var w, Var b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  require(xv.ndim() == 2 && wv.ndim() == 2 && bv.ndim() == 1, "linear expects x[N,In] w[Out,In] b[Out]");
  require(xv.shape[1] == wv.shape[1], "linear input width " + shape_str(xv.shape) +
                                          " does not match weight " + shape_str(wv.shape));
  require(bv.shape[0] == wv.shape[0], "linear bias length mismatch");
  const int N = xv.shape[0], In = xv.shape[1], Out = wv.shape[0];
  Node n;
  n.op = Op::Linear;
  n.in = {x.id, w.id, b.id};
  n.val = Tensor({N, Out});
  for (int r = 0; r < N; ++r) {
    const double* xrow = &xv.data[static_cast<size_t>(r) * In];
    for (int o = 0; o < Out; ++o) {
      const double* wrow = &wv.data[static_cast<size_t>(o) * In];
      double acc = bv[o];
      for (int i = 0; i < In; ++i) acc += xrow[i] * wrow[i];
      n.val.at2(r, o) = acc;
    }
  }
  check(n.val, "linear output");
  return Var{push(std::move(n))};
}

Var Tape::embedding(Var table, int row) {
  const Tensor& t = value(table);
  require(t.ndim() == 2, "embedding table must be 2-d");
  require(row >= 0 && row < t.shape[0], "embedding row out of range");
  const int E = t.shape[1];
  Node n;
  n.op = Op::Embedding;
  n.in = {table.id, -1, -1};
  n.i0 = row;
  n.val = Tensor({E});
  std::memcpy(n.val.data.data(), &t.data[static_cast<size_t>(row) * E], sizeof(double) * E);
  return Var{push(std::move(n))};
}

Var Tape::relu(Var x) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::Relu;
  n.in = {x.id, -1, -1};
  n.val = xv;
  for (double& v : n.val.data) v = v > 0.0 ? v : 0.0;
  return Var{push(std::move(n))};
}

Var Tape::sigmoid(Var x) {
  const Tensor& xv = value(x);
  Node n;
  n.op = Op::Sigmoid;
  n.in = {x.id, -1, -1};
  n.val = xv;
  for (double& v : n.val.data) v = stable_sigmoid(v);
  return Var{push(std::move(n))};
}

Var Tape::softmax_rows(Var x) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 2, "softmax_rows expects [N,C]");
  const int N = xv.shape[0], C = xv.shape[1];
  Node n;
  n.op = Op::SoftmaxRows;
  n.in = {x.id, -1, -1};
  n.val = Tensor({N, C});
  for (int r = 0; r < N; ++r) {
    double m = -1e300;
    for (int c = 0; c < C; ++c) m = std::max(m, xv.at2(r, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(xv.at2(r, c) - m);
    for (int c = 0; c < C; ++c) n.val.at2(r, c) = std::exp(xv.at2(r, c) - m) / z;
  }
  return Var{push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "add shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Node n;
  n.op = Op::Add;
  n.in = {a.id, b.id, -1};
  n.val = av;
  for (int64_t i = 0; i < n.val.numel(); ++i) n.val[i] += bv[i];
  check(n.val, "add output");
  return Var{push(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "mul shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Node n;
  n.op = Op::Mul;
  n.in = {a.id, b.id, -1};
  n.val = av;
  for (int64_t i = 0; i < n.val.numel(); ++i) n.val[i] *= bv[i];
  check(n.val, "mul output");
  return Var{push(std::move(n))};
}

Var Tape::add_scalar(Var a, double s) {
  Node n;
  n.op = Op::AddScalar;
  n.in = {a.id, -1, -1};
  n.f0 = s;
  n.val = value(a);
  for (double& v : n.val.data) v += s;
  check(n.val, "add_scalar output");
  return Var{push(std::move(n))};
}

Var Tape::mul_scalar(Var a, double s) {
  Node n;
  n.op = Op::MulScalar;
  n.in = {a.id, -1, -1};
  n.f0 = s;
  n.val = value(a);
  for (double& v : n.val.data) v *= s;
  check(n.val, "mul_scalar output");
  return Var{push(std::move(n))};
}

Var Tape::exp(Var a) {
  Node n;
  n.op = Op::Exp;
  n.in = {a.id, -1, -1};
  n.val = value(a);
  for (double& v : n.val.data) v = std::exp(v);
  check(n.val, "exp output");
  return Var{push(std::move(n))};
}

Var Tape::channel_bias(Var x, Var b) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(b);
  require(xv.ndim() == 4 && bv.ndim() == 1 && bv.shape[0] == xv.shape[1],
          "channel_bias expects [B,C,H,W] and [C]");
  Node n;
  n.op = Op::ChannelBias;
  n.in = {x.id, b.id, -1};
  n.val = xv;
  const int B = xv.shape[0], C = xv.shape[1];
  const int64_t hw = static_cast<int64_t>(xv.shape[2]) * xv.shape[3];
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      double* row = &n.val.data[(static_cast<size_t>(bb) * C + c) * hw];
      for (int64_t i = 0; i < hw; ++i) row[i] += bv[c];
    }
  check(n.val, "channel_bias output");
  return Var{push(std::move(n))};
}

Var Tape::concat(const std::vector<Var>& xs, int axis) {
  require(!xs.empty(), "concat of zero tensors");
  const Tensor& first = value(xs[0]);
  require(axis >= 0 && axis < first.ndim(), "concat axis out of range");
  std::vector<int> out_shape = first.shape;
  for (size_t i = 1; i < xs.size(); ++i) {
    const Tensor& t = value(xs[i]);
    require(t.ndim() == first.ndim(), "concat rank mismatch");
    for (int d = 0; d < first.ndim(); ++d)
      if (d != axis)
        require(t.shape[d] == first.shape[d], "concat shape mismatch on non-concat axis");
    out_shape[axis] += t.shape[axis];
  }
  // outer = product of dims before axis, inner = product after
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= first.shape[d];
  for (int d = axis + 1; d < first.ndim(); ++d) inner *= first.shape[d];
  Node n;
  n.op = Op::Concat;
  n.i0 = axis;
  for (Var v : xs) n.in_list.push_back(v.id);
  n.val = Tensor(out_shape);
  const int64_t out_stride = static_cast<int64_t>(out_shape[axis]) * inner;
  int64_t offset = 0;
  for (Var v : xs) {
    const Tensor& t = value(v);
    const int64_t piece = static_cast<int64_t>(t.shape[axis]) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(&n.val.data[o * out_stride + offset], &t.data[o * piece],
                  sizeof(double) * static_cast<size_t>(piece));
    offset += piece;
  }
  return Var{push(std::move(n))};
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  const Tensor& xv = value(x);
  require(numel_of(shape) == xv.numel(),
          "reshape numel mismatch " + shape_str(xv.shape) + " -> " + shape_str(shape));
  Node n;
  n.op = Op::Reshape;
  n.in = {x.id, -1, -1};
  n.val = xv;
  n.val.shape = std::move(shape);
  return Var{push(std::move(n))};
}

Var Tape::flatten(Var x) {
  return reshape(x, {static_cast<int>(value(x).numel())});
}

Var Tape::gather(Var x, std::vector<int64_t> indices) {
  const Tensor& xv = value(x);
  for (int64_t i : indices) require(i >= 0 && i < xv.numel(), "gather index out of range");
  Node n;
  n.op = Op::Gather;
  n.in = {x.id, -1, -1};
  n.val = Tensor({static_cast<int>(indices.size())});
  for (size_t j = 0; j < indices.size(); ++j) n.val[static_cast<int64_t>(j)] = xv[indices[j]];
  n.iaux = std::move(indices);
  return Var{push(std::move(n))};
}

Var Tape::sum(Var x) {
  const Tensor& xv = value(x);
  double acc = 0.0;
  for (double v : xv.data) acc += v;
  Node n;
  n.op = Op::Sum;
  n.in = {x.id, -1, -1};
  n.val = Tensor::scalar(acc);
  check(n.val, "sum output");
  return Var{push(std::move(n))};
}

Var Tape::smooth_l1(Var pred, Var target, double beta) {
  const Tensor& pv = value(pred);
  const Tensor& tv = value(target);
  require(pv.same_shape(tv), "smooth_l1 length mismatch " + shape_str(pv.shape) + " vs " +
                                 shape_str(tv.shape));
  require(beta > 0.0, "smooth_l1 beta must be positive");
  double acc = 0.0;
  for (int64_t i = 0; i < pv.numel(); ++i) {
    const double d = pv[i] - tv[i];
    const double a = std::fabs(d);
    acc += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  Node n;
  n.op = Op::SmoothL1;
  n.in = {pred.id, target.id, -1};
  n.f0 = beta;
  n.val = Tensor::scalar(acc);
  check(n.val, "smooth_l1 output");
  return Var{push(std::move(n))};
}

Var Tape::softmax_xent_mean(Var logits, const std::vector<int>& labels) {
  const Tensor& xv = value(logits);
  require(xv.ndim() == 2, "softmax_xent_mean expects [N,C] logits");
  const int N = xv.shape[0], C = xv.shape[1];
  require(static_cast<int>(labels.size()) == N, "softmax_xent_mean label count mismatch");
  Node n;
  n.op = Op::SoftmaxXentMean;
  n.in = {logits.id, -1, -1};
  n.aux = Tensor({N, C});  // probabilities, reused by backward
  double loss = 0.0;
  for (int r = 0; r < N; ++r) {
    require(labels[r] >= 0 && labels[r] < C, "softmax_xent_mean label out of range");
    double m = -1e300;
    for (int c = 0; c < C; ++c) m = std::max(m, xv.at2(r, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(xv.at2(r, c) - m);
    const double lse = m + std::log(z);
    for (int c = 0; c < C; ++c) n.aux.at2(r, c) = std::exp(xv.at2(r, c) - lse);
    loss += lse - xv.at2(r, labels[r]);
  }
  n.iaux.assign(labels.begin(), labels.end());
  n.val = Tensor::scalar(loss / N);
  check(n.val, "softmax_xent_mean output");
  return Var{push(std::move(n))};
}

Var Tape::bce_logits_mean(Var logits, Var targets) {
  const Tensor& zv = value(logits);
  const Tensor& tv = value(targets);
  require(zv.same_shape(tv), "bce_logits_mean shape mismatch");
  const int64_t n_el = zv.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < n_el; ++i) {
    const double z = zv[i], t = tv[i];
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  }
  Node n;
  n.op = Op::BceLogitsMean;
  n.in = {logits.id, targets.id, -1};
  n.val = Tensor::scalar(loss / static_cast<double>(n_el));
  check(n.val, "bce_logits_mean output");
  return Var{push(std::move(n))};
}

void Tape::backward(Var loss) {
  if (backward_done_)
    throw std::logic_error("backward called twice on the same tape; rebuild the forward pass first");
  const Node& ln = node(loss);
  if (ln.val.numel() != 1) throw DimensionError("backward requires a scalar loss");
  grad_buf(loss.id).data[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grd.defined()) continue;
    const Tensor& gy = n.grd;
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Param:
        for (int64_t i = 0; i < gy.numel(); ++i) n.p->grad[i] += gy[i];
        break;
      case Op::Conv2d: {
        conv2d_accum_input_grad(gy, nodes_[n.in[1]].val, n.i0, n.i1, grad_buf(n.in[0]));
        conv2d_accum_kernel_grad(gy, nodes_[n.in[0]].val, n.i0, n.i1, grad_buf(n.in[1]));
        break;
      }
      case Op::Deconv2d: {
        deconv2d_accum_input_grad(gy, nodes_[n.in[1]].val, n.i0, n.i1, grad_buf(n.in[0]));
        deconv2d_accum_kernel_grad(gy, nodes_[n.in[0]].val, n.i0, n.i1, grad_buf(n.in[1]));
        break;
      }
      case Op::MaxPool2d:
      case Op::RoiPool: {
        Tensor& gx = grad_buf(n.in[0]);
        for (size_t i = 0; i < n.iaux.size(); ++i) gx[n.iaux[i]] += gy[static_cast<int64_t>(i)];
        break;
      }
      case Op::Linear: {
        const Tensor& xv = nodes_[n.in[0]].val;
        const Tensor& wv = nodes_[n.in[1]].val;
        Tensor& gx = grad_buf(n.in[0]);
        Tensor& gw = grad_buf(n.in[1]);
        Tensor& gb = grad_buf(n.in[2]);
        const int N = xv.shape[0], In = xv.shape[1], Out = wv.shape[0];
        for (int r = 0; r < N; ++r)
          for (int o = 0; o < Out; ++o) {
            const double g = gy.at2(r, o);
            if (g == 0.0) continue;
            const double* wrow = &wv.data[static_cast<size_t>(o) * In];
            const double* xrow = &xv.data[static_cast<size_t>(r) * In];
            double* gxrow = &gx.data[static_cast<size_t>(r) * In];
            double* gwrow = &gw.data[static_cast<size_t>(o) * In];
            for (int i = 0; i < In; ++i) {
              gxrow[i] += g * wrow[i];
              gwrow[i] += g * xrow[i];
            }
            gb[o] += g;
          }
        break;
      }
      case Op::Embedding: {
        Tensor& gt = grad_buf(n.in[0]);
        const int E = n.val.shape[0];
        for (int e = 0; e < E; ++e)
          gt[static_cast<int64_t>(n.i0) * E + e] += gy[e];
        break;
      }
      case Op::Relu: {
        const Tensor& xv = nodes_[n.in[0]].val;
        Tensor& gx = grad_buf(n.in[0]);
        for (int64_t i = 0; i < gy.numel(); ++i)
          if (xv[i] > 0.0) gx[i] += gy[i];
        break;
      }
      case Op::Sigmoid: {
        Tensor& gx = grad_buf(n.in[0]);
        for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * n.val[i] * (1.0 - n.val[i]);
        break;
      }
      case Op::SoftmaxRows: {
        Tensor& gx = grad_buf(n.in[0]);
        const int N = n.val.shape[0], C = n.val.shape[1];
        for (int r = 0; r < N; ++r) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += gy.at2(r, c) * n.val.at2(r, c);
          for (int c = 0; c < C; ++c)
            gx.at2(r, c) += n.val.at2(r, c) * (gy.at2(r, c) - dot);
        }
        break;
      }
      case Op::Add: {
        Tensor& ga = grad_buf(n.in[0]);
        Tensor& gb2 = grad_buf(n.in[1]);
        for (int64_t i = 0; i < gy.numel(); ++i) {
          ga[i] += gy[i];
          gb2[i] += gy[i];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& av = nodes_[n.in[0]].val;
        const Tensor& bv = nodes_[n.in[1]].val;
        Tensor& ga = grad_buf(n.in[0]);
        Tensor& gb2 = grad_buf(n.in[1]);
        for (int64_t i = 0; i < gy.numel(); ++i) {
          ga[i] += gy[i] * bv[i];
          gb2[i] += gy[i] * av[i];
        }
        break;
      }
      case Op::AddScalar: {
        Tensor& gx = grad_buf(n.in[0]);
        for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
        break;
      }
      case Op::MulScalar: {
        Tensor& gx = grad_buf(n.in[0]);
        for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * n.f0;
        break;
      }
      case Op::Exp: {
        Tensor& gx = grad_buf(n.in[0]);
        for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * n.val[i];
        break;
      }
      case Op::ChannelBias: {
        Tensor& gx = grad_buf(n.in[0]);
        Tensor& gb2 = grad_buf(n.in[1]);
        const int B = n.val.shape[0], C = n.val.shape[1];
        const int64_t hw = static_cast<int64_t>(n.val.shape[2]) * n.val.shape[3];
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const double* g = &gy.data[(static_cast<size_t>(b) * C + c) * hw];
            double* gxr = &gx.data[(static_cast<size_t>(b) * C + c) * hw];
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
              gxr[i] += g[i];
              acc += g[i];
            }
            gb2[c] += acc;
          }
        break;
      }
      case Op::Concat: {
        const int axis = n.i0;
        int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= n.val.shape[d];
        for (int d = axis + 1; d < n.val.ndim(); ++d) inner *= n.val.shape[d];
        const int64_t out_stride = static_cast<int64_t>(n.val.shape[axis]) * inner;
        int64_t offset = 0;
        for (int src : n.in_list) {
          Tensor& g = grad_buf(src);
          const int64_t piece = static_cast<int64_t>(g.shape[axis]) * inner;
          for (int64_t o = 0; o < outer; ++o) {
            const double* from = &gy.data[o * out_stride + offset];
            double* to = &g.data[o * piece];
            for (int64_t i = 0; i < piece; ++i) to[i] += from[i];
          }
          offset += piece;
        }
        break;
      }
      case Op::Reshape: {
        Tensor& gx = grad_buf(n.in[0]);
        for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
        break;
      }
      case Op::Gather: {
        Tensor& gx = grad_buf(n.in[0]);
        for (size_t j = 0; j < n.iaux.size(); ++j) gx[n.iaux[j]] += gy[static_cast<int64_t>(j)];
        break;
      }
      case Op::Sum: {
        Tensor& gx = grad_buf(n.in[0]);
        const double g = gy[0];
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
        break;
      }
      case Op::SmoothL1: {
        const Tensor& pv = nodes_[n.in[0]].val;
        const Tensor& tv = nodes_[n.in[1]].val;
        Tensor& gp = grad_buf(n.in[0]);
        Tensor& gt = grad_buf(n.in[1]);
        const double g = gy[0], beta = n.f0;
        for (int64_t i = 0; i < pv.numel(); ++i) {
          const double d = pv[i] - tv[i];
          const double dd = std::fabs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
          gp[i] += g * dd;
          gt[i] -= g * dd;
        }
        break;
      }
      case Op::SoftmaxXentMean: {
        Tensor& gx = grad_buf(n.in[0]);
        const int N = n.aux.shape[0], C = n.aux.shape[1];
        const double g = gy[0] / N;
        for (int r = 0; r < N; ++r) {
          const int label = static_cast<int>(n.iaux[static_cast<size_t>(r)]);
          for (int c = 0; c < C; ++c)
            gx.at2(r, c) += g * (n.aux.at2(r, c) - (c == label ? 1.0 : 0.0));
        }
        break;
      }
      case Op::BceLogitsMean: {
        const Tensor& zv = nodes_[n.in[0]].val;
        const Tensor& tv = nodes_[n.in[1]].val;
        Tensor& gz = grad_buf(n.in[0]);
        Tensor& gt = grad_buf(n.in[1]);
        const double g = gy[0] / static_cast<double>(zv.numel());
        for (int64_t i = 0; i < zv.numel(); ++i) {
          gz[i] += g * (stable_sigmoid(zv[i]) - tv[i]);
          gt[i] -= g * zv[i];
        }
        break;
      }
    }
  }
  backward_done_ = true;
}

// ---------------------------------------------------------------------------
// finite differences

double finite_diff_check(const std::function<DiffResult(const Tensor&)>& f,
                         const Tensor& point, double epsilon, int samples, Rng& rng) {
  if (epsilon <= 0.0) throw std::invalid_argument("finite_diff_check epsilon must be positive");
  DiffResult base = f(point);
  if (!std::isfinite(base.value)) throw NumericError("finite_diff_check: non-finite base value");
  if (base.grad.shape != point.shape)
    throw DimensionError("finite_diff_check: gradient shape does not match point");
  const int64_t n = point.numel();
  std::vector<int64_t> coords;
  if (samples <= 0 || samples >= n) {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    coords.reserve(static_cast<size_t>(samples));
    for (int i = 0; i < samples; ++i)
      coords.push_back(static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n)));
  }
  double max_rel = 0.0;
  Tensor probe = point;
  for (int64_t idx : coords) {
    const double saved = probe[idx];
    probe[idx] = saved + epsilon;
    const double fp = f(probe).value;
    probe[idx] = saved - epsilon;
    const double fm = f(probe).value;
    probe[idx] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_check: non-finite value at perturbed point");
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double analytic = base.grad[idx];
    const double rel = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(analytic));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

double finite_diff_check_params(const std::function<double()>& loss,
                                const std::function<void()>& loss_backward,
                                ParamStore& params, double epsilon,
                                int total_samples, Rng& rng) {
  params.zero_grads();
  loss_backward();
  // snapshot analytic grads
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params.all()) analytic.push_back(p->grad);

  struct Coord {
    size_t param;
    int64_t offset;
  };
  std::vector<Coord> coords;
  const int64_t total = params.total_values();
  // every small tensor gets one guaranteed coordinate (loss weights etc.)
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const int64_t n = params.all()[pi]->value.numel();
    if (n <= 16) coords.push_back({pi, static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n))});
  }
  while (static_cast<int>(coords.size()) < total_samples) {
    int64_t flat = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(total));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      const int64_t n = params.all()[pi]->value.numel();
      if (flat < n) {
        coords.push_back({pi, flat});
        break;
      }
      flat -= n;
    }
  }
  double max_rel = 0.0;
  for (const Coord& c : coords) {
    Parameter& p = *params.all()[c.param].get();
    const double saved = p.value[c.offset];
    p.value[c.offset] = saved + epsilon;
    const double fp = loss();
    p.value[c.offset] = saved - epsilon;
    const double fm = loss();
    p.value[c.offset] = saved;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double an = analytic[c.param][c.offset];
    const double rel = std::fabs(an - numeric) / std::max(1.0, std::fabs(an));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace mdf
