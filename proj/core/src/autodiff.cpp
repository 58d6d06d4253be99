#include "fot/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace fot::ad {

std::uint64_t params_checksum(const ParamRefs& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Parameter* p : params)
    h = fnv1a(p->value.data(), static_cast<std::size_t>(p->value.size()) * sizeof(double), h);
  return h;
}

std::int64_t params_count(const ParamRefs& params) {
  std::int64_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

int Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> back) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::add_grad(int id, const Tensor& g) {
  Tensor& buf = grad_buf(id);
  double* d = buf.data();
  const double* s = g.data();
  const std::int64_t n = buf.size();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

Value Tape::input(Tensor v) { return {push(std::move(v), false, nullptr)}; }

Value Tape::param(Parameter& p) {
  int id = push(p.value, p.requires_grad, nullptr);
  nodes_[static_cast<std::size_t>(id)].bound = p.requires_grad ? &p : nullptr;
  return {id};
}

const Tensor& Tape::val(Value v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

const Tensor& Tape::grad(Value v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.empty()) fail("gradient not computed for node");
  return n.grad;
}

void Tape::backward(Value root) {
  Node& r = nodes_[static_cast<std::size_t>(root.id)];
  if (r.value.size() != 1) fail("backward root must be scalar, got " + r.value.shape_str());
  grad_buf(root.id)[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this, id);
    if (n.bound) {
      double* d = n.bound->grad.data();
      const double* s = n.grad.data();
      for (std::int64_t i = 0; i < n.grad.size(); ++i) d[i] += s[i];
    }
  }
}

// ---- elementwise ----------------------------------------------------------

Value Tape::add(Value a, Value b) {
  const Tensor& ta = node_val(a.id);
  const Tensor& tb = node_val(b.id);
  if (!ta.same_shape(tb)) fail("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
  const bool rg = needs_grad(a.id) || needs_grad(b.id);
  int aid = a.id, bid = b.id;
  return {push(std::move(out), rg, [aid, bid](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            if (t.needs_grad(aid)) t.add_grad(aid, g);
            if (t.needs_grad(bid)) t.add_grad(bid, g);
          })};
}

Value Tape::mul(Value a, Value b) {
  const Tensor& ta = node_val(a.id);
  const Tensor& tb = node_val(b.id);
  if (!ta.same_shape(tb)) fail("mul: shape mismatch");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
  const bool rg = needs_grad(a.id) || needs_grad(b.id);
  int aid = a.id, bid = b.id;
  return {push(std::move(out), rg, [aid, bid](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor& va = t.node_val(aid);
            const Tensor& vb = t.node_val(bid);
            if (t.needs_grad(aid)) {
              Tensor& ga = t.grad_buf(aid);
              for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.needs_grad(bid)) {
              Tensor& gb = t.grad_buf(bid);
              for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
          })};
}

Value Tape::scale(Value a, double c) {
  const Tensor& ta = node_val(a.id);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = c * ta[i];
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid, c](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            Tensor& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
          })};
}

Value Tape::relu(Value a) {
  const Tensor& ta = node_val(a.id);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor& va = t.node_val(aid);
            Tensor& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < g.size(); ++i)
              if (va[i] > 0.0) ga[i] += g[i];
          })};
}

Value Tape::sigmoid(Value a) {
  const Tensor& ta = node_val(a.id);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid](Tape& t, int self) {
            const Node& n = t.nodes_[static_cast<std::size_t>(self)];
            const Tensor& g = n.grad;
            const Tensor& y = n.value;
            Tensor& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
          })};
}

Value Tape::log_eps(Value a, double eps) {
  const Tensor& ta = node_val(a.id);
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(ta[i] + eps);
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid, eps](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor& va = t.node_val(aid);
            Tensor& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (va[i] + eps);
          })};
}

Value Tape::flatten2(Value a) {
  const Tensor& ta = node_val(a.id);
  if (ta.rank() < 2) fail("flatten2 expects rank >= 2");
  const int B = ta.dim(0);
  const int rest = static_cast<int>(ta.size() / B);
  Tensor out = ta.reshaped({B, rest});
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            Tensor& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          })};
}

Value Tape::concat_channels(const std::vector<Value>& xs) {
  if (xs.empty()) fail("concat_channels: empty input list");
  const Tensor& first = node_val(xs[0].id);
  if (first.rank() != 4) fail("concat_channels expects (B,C,H,W) tensors");
  const int B = first.dim(0), H = first.dim(2), W = first.dim(3);
  int Ctot = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<int> chans;
  for (Value v : xs) {
    const Tensor& tv = node_val(v.id);
    if (tv.rank() != 4 || tv.dim(0) != B || tv.dim(2) != H || tv.dim(3) != W)
      fail("concat_channels: incompatible shapes");
    Ctot += tv.dim(1);
    rg = rg || needs_grad(v.id);
    ids.push_back(v.id);
    chans.push_back(tv.dim(1));
  }
  Tensor out({B, Ctot, H, W});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    std::int64_t co = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Tensor& tv = node_val(ids[k]);
      const double* src = tv.data() + (static_cast<std::int64_t>(b) * chans[k]) * plane;
      double* dst = out.data() + (static_cast<std::int64_t>(b) * Ctot + co) * plane;
      std::copy(src, src + chans[k] * plane, dst);
      co += chans[k];
    }
  }
  return {push(std::move(out), rg, [ids, chans, B, Ctot, plane](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            for (int b = 0; b < B; ++b) {
              std::int64_t co = 0;
              for (std::size_t k = 0; k < ids.size(); ++k) {
                if (t.needs_grad(ids[k])) {
                  Tensor& gi = t.grad_buf(ids[k]);
                  const double* src = g.data() + (static_cast<std::int64_t>(b) * Ctot + co) * plane;
                  double* dst = gi.data() + (static_cast<std::int64_t>(b) * chans[k]) * plane;
                  for (std::int64_t i = 0; i < chans[k] * plane; ++i) dst[i] += src[i];
                }
                co += chans[k];
              }
            }
          })};
}

// ---- linear algebra -------------------------------------------------------

Value Tape::matmul_nt(Value a, Value b) {
  const Tensor& ta = node_val(a.id);
  const Tensor& tb = node_val(b.id);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1))
    fail("matmul_nt: incompatible shapes " + ta.shape_str() + " vs " + tb.shape_str());
  const int B = ta.dim(0), d = ta.dim(1), C = tb.dim(0);
  Tensor out({B, C});
  for (int i = 0; i < B; ++i) {
    const double* ra = ta.data() + static_cast<std::int64_t>(i) * d;
    for (int j = 0; j < C; ++j) {
      const double* rb = tb.data() + static_cast<std::int64_t>(j) * d;
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += ra[k] * rb[k];
      out.at(i, j) = s;
    }
  }
  const bool rg = needs_grad(a.id) || needs_grad(b.id);
  int aid = a.id, bid = b.id;
  return {push(std::move(out), rg, [aid, bid, B, d, C](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor& va = t.node_val(aid);
            const Tensor& vb = t.node_val(bid);
            if (t.needs_grad(aid)) {
              Tensor& ga = t.grad_buf(aid);
              for (int i = 0; i < B; ++i)
                for (int j = 0; j < C; ++j) {
                  const double gij = g.at(i, j);
                  const double* rb = vb.data() + static_cast<std::int64_t>(j) * d;
                  double* ra = ga.data() + static_cast<std::int64_t>(i) * d;
                  for (int k = 0; k < d; ++k) ra[k] += gij * rb[k];
                }
            }
            if (t.needs_grad(bid)) {
              Tensor& gb = t.grad_buf(bid);
              for (int i = 0; i < B; ++i)
                for (int j = 0; j < C; ++j) {
                  const double gij = g.at(i, j);
                  const double* ra = va.data() + static_cast<std::int64_t>(i) * d;
                  double* rb = gb.data() + static_cast<std::int64_t>(j) * d;
                  for (int k = 0; k < d; ++k) rb[k] += gij * ra[k];
                }
            }
          })};
}

Value Tape::l2normalize_rows(Value a, double eps) {
  const Tensor& ta = node_val(a.id);
  if (ta.rank() != 2) fail("l2normalize_rows expects (B,d)");
  const int B = ta.dim(0), d = ta.dim(1);
  Tensor out({B, d});
  std::vector<double> norms(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const double* r = ta.data() + static_cast<std::int64_t>(i) * d;
    double s = 0.0;
    for (int k = 0; k < d; ++k) s += r[k] * r[k];
    const double n = std::sqrt(s + eps * eps);
    norms[static_cast<std::size_t>(i)] = n;
    double* o = out.data() + static_cast<std::int64_t>(i) * d;
    for (int k = 0; k < d; ++k) o[k] = r[k] / n;
  }
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid, B, d, norms](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor& va = t.node_val(aid);
            Tensor& ga = t.grad_buf(aid);
            for (int i = 0; i < B; ++i) {
              const double n = norms[static_cast<std::size_t>(i)];
              const double* x = va.data() + static_cast<std::int64_t>(i) * d;
              const double* gy = g.data() + static_cast<std::int64_t>(i) * d;
              double dot = 0.0;
              for (int k = 0; k < d; ++k) dot += gy[k] * x[k];
              double* gx = ga.data() + static_cast<std::int64_t>(i) * d;
              const double n3 = n * n * n;
              for (int k = 0; k < d; ++k) gx[k] += gy[k] / n - x[k] * dot / n3;
            }
          })};
}

Value Tape::scale_by(Value a, Value s) {
  const Tensor& ta = node_val(a.id);
  const Tensor& ts = node_val(s.id);
  if (ts.size() != 1) fail("scale_by: scale must have a single element");
  Tensor out(ta.shape());
  const double sv = ts[0];
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = sv * ta[i];
  const bool rg = needs_grad(a.id) || needs_grad(s.id);
  int aid = a.id, sid = s.id;
  return {push(std::move(out), rg, [aid, sid, sv](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            const Tensor& va = t.node_val(aid);
            if (t.needs_grad(aid)) {
              Tensor& ga = t.grad_buf(aid);
              for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += sv * g[i];
            }
            if (t.needs_grad(sid)) {
              Tensor& gs = t.grad_buf(sid);
              double acc = 0.0;
              for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i] * va[i];
              gs[0] += acc;
            }
          })};
}

// ---- convolutional --------------------------------------------------------

namespace {
int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}
}  // namespace

Value Tape::conv2d(Value x, Value w, Value bias, int stride, int pad) {
  const Tensor& tx = node_val(x.id);
  const Tensor& tw = node_val(w.id);
  if (tx.rank() != 4 || tw.rank() != 4) fail("conv2d expects (B,C,H,W) and (O,C,kh,kw)");
  const int B = tx.dim(0), Cin = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const int O = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
  if (tw.dim(1) != Cin) fail("conv2d: channel mismatch");
  const int OH = conv_out_dim(H, kh, stride, pad);
  const int OW = conv_out_dim(W, kw, stride, pad);
  if (OH <= 0 || OW <= 0) fail("conv2d: output would be empty");
  const Tensor& tb = node_val(bias.id);
  if (tb.size() != O) fail("conv2d: bias size mismatch");

  Tensor out({B, O, OH, OW});
  parallel_for(0, static_cast<std::int64_t>(B) * O, [&](std::int64_t bo) {
    const int b = static_cast<int>(bo / O);
    const int o = static_cast<int>(bo % O);
    double* op = out.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
    const double bv = tb[o];
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) op[i] = bv;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* xp = tx.data() + ((static_cast<std::int64_t>(b) * Cin + ci) * H) * W;
      const double* wp = tw.data() + ((static_cast<std::int64_t>(o) * Cin + ci) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = wp[ky * kw + kx];
          for (int oy = 0; oy < OH; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            double* orow = op + static_cast<std::int64_t>(oy) * OW;
            const double* xrow = xp + static_cast<std::int64_t>(iy) * W;
            for (int ox = 0; ox < OW; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              orow[ox] += wv * xrow[ix];
            }
          }
        }
    }
  });

  const bool rg = needs_grad(x.id) || needs_grad(w.id) || needs_grad(bias.id);
  int xid = x.id, wid = w.id, bid = bias.id;
  auto back = [xid, wid, bid, B, Cin, H, W, O, kh, kw, OH, OW, stride, pad](Tape& t, int self) {
    const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    const Tensor& vx = t.node_val(xid);
    const Tensor& vw = t.node_val(wid);
    if (t.needs_grad(bid)) {
      Tensor& gb = t.grad_buf(bid);
      for (int o = 0; o < O; ++o) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* gp = g.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) acc += gp[i];
        }
        gb[o] += acc;
      }
    }
    if (t.needs_grad(wid)) {
      Tensor& gw = t.grad_buf(wid);
      parallel_for(0, O, [&](std::int64_t o) {
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              double acc = 0.0;
              for (int b = 0; b < B; ++b) {
                const double* gp = g.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
                const double* xp = vx.data() + ((static_cast<std::int64_t>(b) * Cin + ci) * H) * W;
                for (int oy = 0; oy < OH; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  const double* grow = gp + static_cast<std::int64_t>(oy) * OW;
                  const double* xrow = xp + static_cast<std::int64_t>(iy) * W;
                  for (int ox = 0; ox < OW; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    acc += grow[ox] * xrow[ix];
                  }
                }
              }
              gw[((static_cast<std::int64_t>(o) * Cin + ci) * kh + ky) * kw + kx] += acc;
            }
      });
    }
    if (t.needs_grad(xid)) {
      Tensor& gx = t.grad_buf(xid);
      parallel_for(0, B, [&](std::int64_t b) {
        for (int o = 0; o < O; ++o) {
          const double* gp = g.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
          for (int ci = 0; ci < Cin; ++ci) {
            double* xp = gx.data() + ((static_cast<std::int64_t>(b) * Cin + ci) * H) * W;
            const double* wp = vw.data() + ((static_cast<std::int64_t>(o) * Cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const double wv = wp[ky * kw + kx];
                for (int oy = 0; oy < OH; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  const double* grow = gp + static_cast<std::int64_t>(oy) * OW;
                  double* xrow = xp + static_cast<std::int64_t>(iy) * W;
                  for (int ox = 0; ox < OW; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    xrow[ix] += wv * grow[ox];
                  }
                }
              }
          }
        }
      });
    }
  };
  return {push(std::move(out), rg, back)};
}

Value Tape::conv_transpose2d(Value x, Value w, Value bias, int stride, int pad) {
  const Tensor& tx = node_val(x.id);
  const Tensor& tw = node_val(w.id);
  if (tx.rank() != 4 || tw.rank() != 4) fail("conv_transpose2d expects (B,C,H,W) and (C,O,kh,kw)");
  const int B = tx.dim(0), Cin = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const int O = tw.dim(1), kh = tw.dim(2), kw = tw.dim(3);
  if (tw.dim(0) != Cin) fail("conv_transpose2d: channel mismatch");
  const int OH = (H - 1) * stride - 2 * pad + kh;
  const int OW = (W - 1) * stride - 2 * pad + kw;
  if (OH <= 0 || OW <= 0) fail("conv_transpose2d: output would be empty");
  const Tensor& tb = node_val(bias.id);
  if (tb.size() != O) fail("conv_transpose2d: bias size mismatch");

  Tensor out({B, O, OH, OW});
  parallel_for(0, B, [&](std::int64_t b) {
    for (int o = 0; o < O; ++o) {
      double* op = out.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
      const double bv = tb[o];
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) op[i] = bv;
      for (int ci = 0; ci < Cin; ++ci) {
        const double* xp = tx.data() + ((static_cast<std::int64_t>(b) * Cin + ci) * H) * W;
        const double* wp = tw.data() + ((static_cast<std::int64_t>(ci) * O + o) * kh) * kw;
        for (int iy = 0; iy < H; ++iy)
          for (int ix = 0; ix < W; ++ix) {
            const double xv = xp[static_cast<std::int64_t>(iy) * W + ix];
            if (xv == 0.0) continue;
            for (int ky = 0; ky < kh; ++ky) {
              const int oy = iy * stride - pad + ky;
              if (oy < 0 || oy >= OH) continue;
              double* orow = op + static_cast<std::int64_t>(oy) * OW;
              const double* wrow = wp + static_cast<std::int64_t>(ky) * kw;
              for (int kx = 0; kx < kw; ++kx) {
                const int ox = ix * stride - pad + kx;
                if (ox < 0 || ox >= OW) continue;
                orow[ox] += xv * wrow[kx];
              }
            }
          }
      }
    }
  });

  const bool rg = needs_grad(x.id) || needs_grad(w.id) || needs_grad(bias.id);
  int xid = x.id, wid = w.id, bid = bias.id;
  auto back = [xid, wid, bid, B, Cin, H, W, O, kh, kw, OH, OW, stride, pad](Tape& t, int self) {
    const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    const Tensor& vx = t.node_val(xid);
    const Tensor& vw = t.node_val(wid);
    if (t.needs_grad(bid)) {
      Tensor& gb = t.grad_buf(bid);
      for (int o = 0; o < O; ++o) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* gp = g.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) acc += gp[i];
        }
        gb[o] += acc;
      }
    }
    if (t.needs_grad(xid)) {
      // d x[b,ci,iy,ix] = sum_{o,ky,kx} g[b,o,iy*s-p+ky,ix*s-p+kx] * w[ci,o,ky,kx]
      Tensor& gx = t.grad_buf(xid);
      parallel_for(0, B, [&](std::int64_t b) {
        for (int ci = 0; ci < Cin; ++ci) {
          double* xp = gx.data() + ((static_cast<std::int64_t>(b) * Cin + ci) * H) * W;
          for (int o = 0; o < O; ++o) {
            const double* gp = g.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
            const double* wp = vw.data() + ((static_cast<std::int64_t>(ci) * O + o) * kh) * kw;
            for (int iy = 0; iy < H; ++iy)
              for (int ix = 0; ix < W; ++ix) {
                double acc = 0.0;
                for (int ky = 0; ky < kh; ++ky) {
                  const int oy = iy * stride - pad + ky;
                  if (oy < 0 || oy >= OH) continue;
                  const double* grow = gp + static_cast<std::int64_t>(oy) * OW;
                  const double* wrow = wp + static_cast<std::int64_t>(ky) * kw;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ox = ix * stride - pad + kx;
                    if (ox < 0 || ox >= OW) continue;
                    acc += grow[ox] * wrow[kx];
                  }
                }
                xp[static_cast<std::int64_t>(iy) * W + ix] += acc;
              }
          }
        }
      });
    }
    if (t.needs_grad(wid)) {
      Tensor& gw = t.grad_buf(wid);
      parallel_for(0, Cin, [&](std::int64_t ci) {
        for (int o = 0; o < O; ++o)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              double acc = 0.0;
              for (int b = 0; b < B; ++b) {
                const double* xp = vx.data() + ((static_cast<std::int64_t>(b) * Cin + ci) * H) * W;
                const double* gp = g.data() + ((static_cast<std::int64_t>(b) * O + o) * OH) * OW;
                for (int iy = 0; iy < H; ++iy) {
                  const int oy = iy * stride - pad + ky;
                  if (oy < 0 || oy >= OH) continue;
                  for (int ix = 0; ix < W; ++ix) {
                    const int ox = ix * stride - pad + kx;
                    if (ox < 0 || ox >= OW) continue;
                    acc += xp[static_cast<std::int64_t>(iy) * W + ix] *
                           gp[static_cast<std::int64_t>(oy) * OW + ox];
                  }
                }
              }
              gw[((static_cast<std::int64_t>(ci) * O + o) * kh + ky) * kw + kx] += acc;
            }
      });
    }
  };
  return {push(std::move(out), rg, back)};
}

Value Tape::pad_spatial(Value x, int pad_bottom, int pad_right) {
  const Tensor& tx = node_val(x.id);
  if (tx.rank() != 4) fail("pad_spatial expects (B,C,H,W)");
  if (pad_bottom < 0 || pad_right < 0) fail("pad_spatial: negative padding");
  if (pad_bottom == 0 && pad_right == 0) return x;
  const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const int OH = H + pad_bottom, OW = W + pad_right;
  Tensor out({B, C, OH, OW});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y) {
        const double* src = tx.data() + (((static_cast<std::int64_t>(b) * C + c) * H + y)) * W;
        double* dst = out.data() + (((static_cast<std::int64_t>(b) * C + c) * OH + y)) * OW;
        std::copy(src, src + W, dst);
      }
  int xid = x.id;
  return {push(std::move(out), needs_grad(x.id), [xid, B, C, H, W, OH, OW](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            Tensor& gx = t.grad_buf(xid);
            for (int b = 0; b < B; ++b)
              for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y) {
                  const double* src =
                      g.data() + (((static_cast<std::int64_t>(b) * C + c) * OH + y)) * OW;
                  double* dst =
                      gx.data() + (((static_cast<std::int64_t>(b) * C + c) * H + y)) * W;
                  for (int xx = 0; xx < W; ++xx) dst[xx] += src[xx];
                }
          })};
}

Value Tape::crop_spatial(Value x, int out_h, int out_w) {
  const Tensor& tx = node_val(x.id);
  if (tx.rank() != 4) fail("crop_spatial expects (B,C,H,W)");
  const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  if (out_h > H || out_w > W || out_h < 1 || out_w < 1) fail("crop_spatial: invalid target size");
  if (out_h == H && out_w == W) return x;
  Tensor out({B, C, out_h, out_w});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < out_h; ++y) {
        const double* src = tx.data() + (((static_cast<std::int64_t>(b) * C + c) * H + y)) * W;
        double* dst =
            out.data() + (((static_cast<std::int64_t>(b) * C + c) * out_h + y)) * out_w;
        std::copy(src, src + out_w, dst);
      }
  int xid = x.id;
  return {push(std::move(out), needs_grad(x.id),
               [xid, B, C, H, W, out_h, out_w](Tape& t, int self) {
                 const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                 Tensor& gx = t.grad_buf(xid);
                 for (int b = 0; b < B; ++b)
                   for (int c = 0; c < C; ++c)
                     for (int y = 0; y < out_h; ++y) {
                       const double* src =
                           g.data() +
                           (((static_cast<std::int64_t>(b) * C + c) * out_h + y)) * out_w;
                       double* dst =
                           gx.data() + (((static_cast<std::int64_t>(b) * C + c) * H + y)) * W;
                       for (int xx = 0; xx < out_w; ++xx) dst[xx] += src[xx];
                     }
               })};
}

Value Tape::maxpool2(Value x) {
  const Tensor& tx = node_val(x.id);
  if (tx.rank() != 4) fail("maxpool2 expects (B,C,H,W)");
  const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const int OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) fail("maxpool2: input too small");
  Tensor out({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* xp = tx.data() + ((static_cast<std::int64_t>(b) * C + c) * H) * W;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          std::int64_t best_idx = (static_cast<std::int64_t>(2 * oy)) * W + 2 * ox;
          double best = xp[best_idx];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t idx = (static_cast<std::int64_t>(2 * oy + dy)) * W + 2 * ox + dx;
              if (xp[idx] > best) {
                best = xp[idx];
                best_idx = idx;
              }
            }
          const std::int64_t oidx = ((static_cast<std::int64_t>(b) * C + c) * OH + oy) * OW + ox;
          out[oidx] = best;
          (*argmax)[static_cast<std::size_t>(oidx)] =
              ((static_cast<std::int64_t>(b) * C + c) * H) * W + best_idx;
        }
    }
  int xid = x.id;
  return {push(std::move(out), needs_grad(x.id), [xid, argmax](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            Tensor& gx = t.grad_buf(xid);
            for (std::int64_t i = 0; i < g.size(); ++i)
              gx[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
          })};
}

Value Tape::instance_norm(Value x, Value gamma, Value beta, double eps) {
  const Tensor& tx = node_val(x.id);
  if (tx.rank() != 4) fail("instance_norm expects (B,C,H,W)");
  const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const std::int64_t N = static_cast<std::int64_t>(H) * W;
  const Tensor& tg = node_val(gamma.id);
  const Tensor& tb = node_val(beta.id);
  if (tg.size() != C || tb.size() != C) fail("instance_norm: affine size mismatch");

  Tensor out(tx.shape());
  auto xhat = std::make_shared<Tensor>(tx.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * C);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* xp = tx.data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
      double mu = 0.0;
      for (std::int64_t i = 0; i < N; ++i) mu += xp[i];
      mu /= static_cast<double>(N);
      double var = 0.0;
      for (std::int64_t i = 0; i < N; ++i) {
        const double d = xp[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(N);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(b) * C + c] = is;
      double* hp = xhat->data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
      double* op = out.data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
      const double gc = tg[c], bc = tb[c];
      for (std::int64_t i = 0; i < N; ++i) {
        hp[i] = (xp[i] - mu) * is;
        op[i] = gc * hp[i] + bc;
      }
    }
  const bool rg = needs_grad(x.id) || needs_grad(gamma.id) || needs_grad(beta.id);
  int xid = x.id, gid = gamma.id, bid = beta.id;
  return {push(std::move(out), rg,
               [xid, gid, bid, B, C, N, xhat, inv_std](Tape& t, int self) {
                 const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
                 const Tensor& vg = t.node_val(gid);
                 if (t.needs_grad(gid) || t.needs_grad(bid)) {
                   Tensor* gg = t.needs_grad(gid) ? &t.grad_buf(gid) : nullptr;
                   Tensor* gb = t.needs_grad(bid) ? &t.grad_buf(bid) : nullptr;
                   for (int c = 0; c < C; ++c) {
                     double accg = 0.0, accb = 0.0;
                     for (int b = 0; b < B; ++b) {
                       const double* gp = g.data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
                       const double* hp =
                           xhat->data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
                       for (std::int64_t i = 0; i < N; ++i) {
                         accg += gp[i] * hp[i];
                         accb += gp[i];
                       }
                     }
                     if (gg) (*gg)[c] += accg;
                     if (gb) (*gb)[c] += accb;
                   }
                 }
                 if (t.needs_grad(xid)) {
                   Tensor& gx = t.grad_buf(xid);
                   for (int b = 0; b < B; ++b)
                     for (int c = 0; c < C; ++c) {
                       const double* gp = g.data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
                       const double* hp =
                           xhat->data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
                       double* xp = gx.data() + ((static_cast<std::int64_t>(b) * C + c)) * N;
                       const double gc = vg[c];
                       const double is = (*inv_std)[static_cast<std::size_t>(b) * C + c];
                       double mean_gy = 0.0, mean_gyh = 0.0;
                       for (std::int64_t i = 0; i < N; ++i) {
                         mean_gy += gp[i];
                         mean_gyh += gp[i] * hp[i];
                       }
                       mean_gy /= static_cast<double>(N);
                       mean_gyh /= static_cast<double>(N);
                       for (std::int64_t i = 0; i < N; ++i)
                         xp[i] += gc * is * (gp[i] - mean_gy - hp[i] * mean_gyh);
                     }
                 }
               })};
}

Value Tape::global_avg_pool(Value x) {
  const Tensor& tx = node_val(x.id);
  if (tx.rank() != 4) fail("global_avg_pool expects (B,C,H,W)");
  const int B = tx.dim(0), C = tx.dim(1);
  const std::int64_t N = static_cast<std::int64_t>(tx.dim(2)) * tx.dim(3);
  Tensor out({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* xp = tx.data() + (static_cast<std::int64_t>(b) * C + c) * N;
      double s = 0.0;
      for (std::int64_t i = 0; i < N; ++i) s += xp[i];
      out.at(b, c) = s / static_cast<double>(N);
    }
  int xid = x.id;
  return {push(std::move(out), needs_grad(x.id), [xid, B, C, N](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
            Tensor& gx = t.grad_buf(xid);
            for (int b = 0; b < B; ++b)
              for (int c = 0; c < C; ++c) {
                const double gv = g.at(b, c) / static_cast<double>(N);
                double* xp = gx.data() + (static_cast<std::int64_t>(b) * C + c) * N;
                for (std::int64_t i = 0; i < N; ++i) xp[i] += gv;
              }
          })};
}

// ---- reductions / losses --------------------------------------------------

Value Tape::sum_all(Value a) {
  const Tensor& ta = node_val(a.id);
  Tensor out({1});
  out[0] = ta.sum();
  int aid = a.id;
  return {push(std::move(out), needs_grad(a.id), [aid](Tape& t, int self) {
            const double g = t.nodes_[static_cast<std::size_t>(self)].grad[0];
            Tensor& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
          })};
}

Value Tape::softmax(Value logits) {
  const Tensor& tz = node_val(logits.id);
  if (tz.rank() != 2) fail("softmax expects (B,C)");
  const int B = tz.dim(0), C = tz.dim(1);
  Tensor out({B, C});
  for (int b = 0; b < B; ++b) {
    const double* z = tz.data() + static_cast<std::int64_t>(b) * C;
    double zmax = z[0];
    for (int c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
    double denom = 0.0;
    double* p = out.data() + static_cast<std::int64_t>(b) * C;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(z[c] - zmax);
      denom += p[c];
    }
    for (int c = 0; c < C; ++c) p[c] /= denom;
  }
  int zid = logits.id;
  return {push(std::move(out), needs_grad(logits.id), [zid, B, C](Tape& t, int self) {
            const Node& n = t.nodes_[static_cast<std::size_t>(self)];
            const Tensor& g = n.grad;
            const Tensor& p = n.value;
            Tensor& gz = t.grad_buf(zid);
            for (int b = 0; b < B; ++b) {
              const double* gr = g.data() + static_cast<std::int64_t>(b) * C;
              const double* pr = p.data() + static_cast<std::int64_t>(b) * C;
              double dot = 0.0;
              for (int c = 0; c < C; ++c) dot += gr[c] * pr[c];
              double* zr = gz.data() + static_cast<std::int64_t>(b) * C;
              for (int c = 0; c < C; ++c) zr[c] += pr[c] * (gr[c] - dot);
            }
          })};
}

Value Tape::softmax_cross_entropy(Value logits, const std::vector<int>& labels) {
  const Tensor& tz = node_val(logits.id);
  if (tz.rank() != 2) fail("softmax_cross_entropy expects (B,C)");
  const int B = tz.dim(0), C = tz.dim(1);
  if (static_cast<int>(labels.size()) != B) fail("softmax_cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= C) fail("softmax_cross_entropy: label out of range");
  auto probs = std::make_shared<Tensor>(std::vector<int>{B, C});
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* z = tz.data() + static_cast<std::int64_t>(b) * C;
    double zmax = z[0];
    for (int c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
    double denom = 0.0;
    double* p = probs->data() + static_cast<std::int64_t>(b) * C;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(z[c] - zmax);
      denom += p[c];
    }
    for (int c = 0; c < C; ++c) p[c] /= denom;
    loss -= (z[labels[static_cast<std::size_t>(b)]] - zmax - std::log(denom));
  }
  Tensor out({1});
  out[0] = loss / B;
  int zid = logits.id;
  auto lab = std::make_shared<std::vector<int>>(labels);
  return {push(std::move(out), needs_grad(logits.id), [zid, probs, lab, B, C](Tape& t, int self) {
            const double g = t.nodes_[static_cast<std::size_t>(self)].grad[0];
            Tensor& gz = t.grad_buf(zid);
            for (int b = 0; b < B; ++b) {
              const double* p = probs->data() + static_cast<std::int64_t>(b) * C;
              double* zr = gz.data() + static_cast<std::int64_t>(b) * C;
              const int y = (*lab)[static_cast<std::size_t>(b)];
              for (int c = 0; c < C; ++c)
                zr[c] += g * (p[c] - (c == y ? 1.0 : 0.0)) / B;
            }
          })};
}

Value Tape::mse(Value pred, Value target) {
  const Tensor& tp = node_val(pred.id);
  const Tensor& tt = node_val(target.id);
  if (!tp.same_shape(tt)) fail("mse: shape mismatch " + tp.shape_str() + " vs " + tt.shape_str());
  const std::int64_t n = tp.size();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = tp[i] - tt[i];
    s += d * d;
  }
  Tensor out({1});
  out[0] = s / static_cast<double>(n);
  const bool rg = needs_grad(pred.id) || needs_grad(target.id);
  int pid = pred.id, tid = target.id;
  return {push(std::move(out), rg, [pid, tid, n](Tape& t, int self) {
            const double g = t.nodes_[static_cast<std::size_t>(self)].grad[0];
            const Tensor& vp = t.node_val(pid);
            const Tensor& vt = t.node_val(tid);
            const double k = 2.0 * g / static_cast<double>(n);
            if (t.needs_grad(pid)) {
              Tensor& gp = t.grad_buf(pid);
              for (std::int64_t i = 0; i < n; ++i) gp[i] += k * (vp[i] - vt[i]);
            }
            if (t.needs_grad(tid)) {
              Tensor& gt = t.grad_buf(tid);
              for (std::int64_t i = 0; i < n; ++i) gt[i] -= k * (vp[i] - vt[i]);
            }
          })};
}

// ---- optimizer -------------------------------------------------------------

void Adam::step(const ParamRefs& params) {
  if (order_.empty()) {
    order_.assign(params.begin(), params.end());
    state_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state_[i].m = Tensor(params[i]->value.shape());
      state_[i].v = Tensor(params[i]->value.shape());
    }
  } else if (order_.size() != params.size()) {
    fail("Adam::step: parameter set changed between steps");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.requires_grad) continue;
    State& s = state_[i];
    double* w = p.value.data();
    double* g = p.grad.data();
    double* m = s.m.data();
    double* v = s.v.data();
    const std::int64_t n = p.value.size();
    for (std::int64_t k = 0; k < n; ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grad(const ParamRefs& params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace fot::ad
