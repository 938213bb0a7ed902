#include "histocl/nn/network.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "histocl/error.hpp"

namespace histocl::nn {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMapMat = Eigen::Map<const RowMat<Real>>;

struct LayerOffsets {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

// Offsets follow make_layout: conv weight/bias pairs, then head weight/bias pairs.
struct Offsets {
  std::vector<LayerOffsets> conv;
  std::vector<LayerOffsets> head;
  std::size_t total = 0;
};

Offsets compute_offsets(const ModelSpec& spec) {
  Offsets o;
  std::size_t at = 0;
  int in = 3;
  for (const auto& b : spec.conv_blocks) {
    LayerOffsets l;
    l.weight = at;
    at += static_cast<std::size_t>(b.out_channels) * in * 9;
    l.bias = at;
    at += static_cast<std::size_t>(b.out_channels);
    o.conv.push_back(l);
    in = b.out_channels;
  }
  for (const auto& h : spec.heads) {
    LayerOffsets l;
    l.weight = at;
    at += static_cast<std::size_t>(h.n_outputs) * spec.feature_dim;
    l.bias = at;
    at += static_cast<std::size_t>(h.n_outputs);
    o.head.push_back(l);
  }
  o.total = at;
  return o;
}

template <typename Real>
void im2col(const Real* x, int channels, int batch, int side, Real* cols) {
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  const std::size_t n = plane * batch;
  for (int c = 0; c < channels; ++c) {
    const Real* xc = x + c * n;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Real* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * n;
        for (int b = 0; b < batch; ++b) {
          const Real* xb = xc + b * plane;
          Real* rb = row + b * plane;
          for (int y = 0; y < side; ++y) {
            const int yy = y + ky - 1;
            Real* out = rb + static_cast<std::size_t>(y) * side;
            if (yy < 0 || yy >= side) {
              std::fill(out, out + side, Real(0));
              continue;
            }
            const Real* in = xb + static_cast<std::size_t>(yy) * side;
            for (int x0 = 0; x0 < side; ++x0) {
              const int xx = x0 + kx - 1;
              out[x0] = (xx < 0 || xx >= side) ? Real(0) : in[xx];
            }
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im(const Real* cols, int channels, int batch, int side, Real* dx) {
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  const std::size_t n = plane * batch;
  std::fill(dx, dx + n * channels, Real(0));
  for (int c = 0; c < channels; ++c) {
    Real* dc = dx + c * n;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Real* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * n;
        for (int b = 0; b < batch; ++b) {
          Real* db = dc + b * plane;
          const Real* rb = row + b * plane;
          for (int y = 0; y < side; ++y) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= side) continue;
            const Real* in = rb + static_cast<std::size_t>(y) * side;
            Real* out = db + static_cast<std::size_t>(yy) * side;
            for (int x0 = 0; x0 < side; ++x0) {
              const int xx = x0 + kx - 1;
              if (xx >= 0 && xx < side) out[xx] += in[x0];
            }
          }
        }
      }
    }
  }
}

void check_batch(const ModelSpec& spec, const Batch& batch) {
  if (batch.side != spec.input_side) {
    throw ShapeMismatch("batch side " + std::to_string(batch.side) + " does not match model input " +
                        std::to_string(spec.input_side));
  }
  const std::size_t expect = static_cast<std::size_t>(batch.size()) * 3 * batch.side * batch.side;
  if (batch.images.size() != expect || batch.labels.size() != batch.heads.size()) {
    throw ShapeMismatch("batch buffers are inconsistent");
  }
  if (batch.size() == 0) throw ShapeMismatch("empty batch");
}

}  // namespace

void Batch::add(const Patch& p, int head, int label) {
  if (side == 0) side = p.width;
  if (p.width != side || p.height != side) {
    throw ShapeMismatch("patch " + p.source_key + " is " + std::to_string(p.width) + "x" + std::to_string(p.height) +
                        ", batch expects " + std::to_string(side));
  }
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  const std::size_t base = images.size();
  images.resize(base + 3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) images[base + c * plane + i] = static_cast<float>(p.pixels[3 * i + c]) / 255.0f;
  }
  heads.push_back(head);
  labels.push_back(label);
}

template <typename Real>
BatchOutputT<Real> forward_t(std::span<const Real> params, const ModelSpec& spec, const Batch& batch) {
  check_batch(spec, batch);
  const Offsets off = compute_offsets(spec);
  if (params.size() != off.total) {
    throw ShapeMismatch("parameter vector has " + std::to_string(params.size()) + " values, model needs " +
                        std::to_string(off.total));
  }
  const int B = batch.size();
  auto cache = std::make_shared<ForwardCache<Real>>();
  cache->batch = B;

  // channel-major input: 3 x (B*side*side)
  int side = spec.input_side;
  std::size_t plane = static_cast<std::size_t>(side) * side;
  std::vector<Real> x(3 * plane * B);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < 3; ++c) {
      const float* src = batch.images.data() + (static_cast<std::size_t>(b) * 3 + c) * plane;
      Real* dst = x.data() + c * plane * B + b * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<Real>(src[i]);
    }
  }

  int in = 3;
  for (std::size_t l = 0; l < spec.conv_blocks.size(); ++l) {
    const auto& blk = spec.conv_blocks[l];
    BlockCache<Real> bc;
    bc.in_channels = in;
    bc.out_channels = blk.out_channels;
    bc.side = side;
    bc.pool = blk.pool;
    const std::size_t n = plane * B;
    const std::size_t k = static_cast<std::size_t>(in) * 9;
    bc.cols.resize(k * n);
    im2col(x.data(), in, B, side, bc.cols.data());
    bc.activation.resize(static_cast<std::size_t>(blk.out_channels) * n);
    ConstMapMat<Real> w(params.data() + off.conv[l].weight, blk.out_channels, static_cast<Eigen::Index>(k));
    ConstMapMat<Real> cols(bc.cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MapMat<Real> y(bc.activation.data(), blk.out_channels, static_cast<Eigen::Index>(n));
    y.noalias() = w * cols;
    const Real* bias = params.data() + off.conv[l].bias;
    for (int o = 0; o < blk.out_channels; ++o) {
      Real* row = bc.activation.data() + o * n;
      const Real bo = bias[o];
      for (std::size_t i = 0; i < n; ++i) {
        const Real v = row[i] + bo;
        row[i] = v > Real(0) ? v : Real(0);
      }
    }
    if (blk.pool) {
      const int half = side / 2;
      const std::size_t out_plane = static_cast<std::size_t>(half) * half;
      const std::size_t out_n = out_plane * B;
      x.assign(static_cast<std::size_t>(blk.out_channels) * out_n, Real(0));
      bc.pool_argmax.assign(static_cast<std::size_t>(blk.out_channels) * out_n, 0);
      for (int o = 0; o < blk.out_channels; ++o) {
        const Real* row = bc.activation.data() + o * n;
        for (int b = 0; b < B; ++b) {
          for (int py = 0; py < half; ++py) {
            for (int px = 0; px < half; ++px) {
              const std::size_t base = b * plane + static_cast<std::size_t>(2 * py) * side + 2 * px;
              std::array<std::size_t, 4> cand{base, base + 1, base + side, base + side + 1};
              std::size_t best = cand[0];
              for (int q = 1; q < 4; ++q) {
                if (row[cand[q]] > row[best]) best = cand[q];
              }
              const std::size_t dst = o * out_n + b * out_plane + static_cast<std::size_t>(py) * half + px;
              x[dst] = row[best];
              bc.pool_argmax[dst] = static_cast<std::uint32_t>(best);
            }
          }
        }
      }
      side = half;
      plane = out_plane;
    } else {
      x = bc.activation;
    }
    in = blk.out_channels;
    cache->blocks.push_back(std::move(bc));
  }

  BatchOutputT<Real> out;
  out.batch = B;
  out.feature_dim = spec.feature_dim;
  out.features.assign(static_cast<std::size_t>(B) * spec.feature_dim, Real(0));
  const std::size_t n = plane * B;
  for (int c = 0; c < spec.feature_dim; ++c) {
    for (int b = 0; b < B; ++b) {
      const Real* src = x.data() + c * n + b * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(src[i]);
      out.features[static_cast<std::size_t>(b) * spec.feature_dim + c] = static_cast<Real>(acc / static_cast<double>(plane));
    }
  }
  cache->output = std::move(x);
  cache->output_side = side;

  out.logits.resize(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const std::size_t h = spec.head_index(batch.heads[b]);
    const int nout = spec.heads[h].n_outputs;
    const Real* w = params.data() + off.head[h].weight;
    const Real* bias = params.data() + off.head[h].bias;
    const Real* f = out.features.data() + static_cast<std::size_t>(b) * spec.feature_dim;
    auto& lg = out.logits[b];
    lg.resize(static_cast<std::size_t>(nout));
    for (int o = 0; o < nout; ++o) {
      double acc = static_cast<double>(bias[o]);
      for (int j = 0; j < spec.feature_dim; ++j) acc += static_cast<double>(w[o * spec.feature_dim + j]) * f[j];
      lg[o] = static_cast<Real>(acc);
    }
  }
  out.cache = std::move(cache);
  return out;
}

template <typename Real>
std::vector<Real> head_logits_t(std::span<const Real> params, const ModelSpec& spec, std::span<const Real> features,
                                int head_id) {
  const Offsets off = compute_offsets(spec);
  const std::size_t h = spec.head_index(head_id);
  const int d = spec.feature_dim;
  const int nout = spec.heads[h].n_outputs;
  const std::size_t rows = features.size() / static_cast<std::size_t>(d);
  std::vector<Real> out(rows * nout);
  const Real* w = params.data() + off.head[h].weight;
  const Real* bias = params.data() + off.head[h].bias;
  for (std::size_t r = 0; r < rows; ++r) {
    for (int o = 0; o < nout; ++o) {
      double acc = static_cast<double>(bias[o]);
      for (int j = 0; j < d; ++j) acc += static_cast<double>(w[o * d + j]) * features[r * d + j];
      out[r * nout + o] = static_cast<Real>(acc);
    }
  }
  return out;
}

namespace {

// Backbone backward from dL/dfeatures (B x d) into conv parameter gradients.
template <typename Real>
void backward_backbone(std::span<const Real> params, const ModelSpec& spec, const Offsets& off,
                       const ForwardCache<Real>& cache, const std::vector<double>& dfeat, std::vector<Real>& grads) {
  const int B = cache.batch;
  const int d = spec.feature_dim;
  int side = cache.output_side;
  std::size_t plane = static_cast<std::size_t>(side) * side;
  // gradient w.r.t. the last block output (channel-major)
  std::vector<Real> dx(static_cast<std::size_t>(d) * plane * B);
  for (int c = 0; c < d; ++c) {
    for (int b = 0; b < B; ++b) {
      const Real g = static_cast<Real>(dfeat[static_cast<std::size_t>(b) * d + c] / static_cast<double>(plane));
      Real* dst = dx.data() + c * plane * B + b * plane;
      std::fill(dst, dst + plane, g);
    }
  }

  for (std::size_t li = spec.conv_blocks.size(); li-- > 0;) {
    const BlockCache<Real>& bc = cache.blocks[li];
    const int out_c = bc.out_channels;
    const std::size_t in_plane = static_cast<std::size_t>(bc.side) * bc.side;
    const std::size_t n = in_plane * B;
    std::vector<Real> dact;
    if (bc.pool) {
      dact.assign(static_cast<std::size_t>(out_c) * n, Real(0));
      const std::size_t out_n = plane * B;
      for (int o = 0; o < out_c; ++o) {
        Real* drow = dact.data() + o * n;
        const Real* grow = dx.data() + o * out_n;
        const std::uint32_t* arg = bc.pool_argmax.data() + o * out_n;
        for (std::size_t m = 0; m < out_n; ++m) drow[arg[m]] += grow[m];
      }
    } else {
      dact = std::move(dx);
    }
    // ReLU gate and bias gradient
    Real* gb = grads.data() + off.conv[li].bias;
    for (int o = 0; o < out_c; ++o) {
      Real* drow = dact.data() + o * n;
      const Real* arow = bc.activation.data() + o * n;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!(arow[i] > Real(0))) drow[i] = Real(0);
        acc += static_cast<double>(drow[i]);
      }
      gb[o] += static_cast<Real>(acc);
    }
    const std::size_t k = static_cast<std::size_t>(bc.in_channels) * 9;
    ConstMapMat<Real> dy(dact.data(), out_c, static_cast<Eigen::Index>(n));
    ConstMapMat<Real> cols(bc.cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MapMat<Real> gw(grads.data() + off.conv[li].weight, out_c, static_cast<Eigen::Index>(k));
    gw.noalias() += dy * cols.transpose();
    if (li == 0) break;
    ConstMapMat<Real> w(params.data() + off.conv[li].weight, out_c, static_cast<Eigen::Index>(k));
    std::vector<Real> dcols(k * n);
    MapMat<Real> dc(dcols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    dc.noalias() = w.transpose() * dy;
    dx.resize(static_cast<std::size_t>(bc.in_channels) * n);
    col2im(dcols.data(), bc.in_channels, B, bc.side, dx.data());
    side = bc.side;
    plane = in_plane;
  }
}

template <typename Real>
void add_head_backward(const Offsets& off, const ModelSpec& spec, std::size_t head_index, std::span<const Real> params,
                       std::span<const Real> features, int row, std::span<const double> dlogits,
                       std::vector<double>& dfeat, std::vector<Real>& grads) {
  const int d = spec.feature_dim;
  const Real* w = params.data() + off.head[head_index].weight;
  Real* gw = grads.data() + off.head[head_index].weight;
  Real* gb = grads.data() + off.head[head_index].bias;
  const Real* f = features.data() + static_cast<std::size_t>(row) * d;
  double* df = dfeat.data() + static_cast<std::size_t>(row) * d;
  for (std::size_t o = 0; o < dlogits.size(); ++o) {
    const double g = dlogits[o];
    if (g == 0.0) continue;
    gb[o] += static_cast<Real>(g);
    for (int j = 0; j < d; ++j) {
      gw[o * d + j] += static_cast<Real>(g * static_cast<double>(f[j]));
      df[j] += g * static_cast<double>(w[o * d + j]);
    }
  }
}

}  // namespace

template <typename Real>
StepResult<Real> loss_and_backward_t(std::span<const Real> params, const ModelSpec& spec, const Batch& batch,
                                     std::span<const LossTerm> terms) {
  if (terms.empty()) throw UnknownTerm("loss_and_backward needs at least one loss term");
  const BatchOutputT<Real> fwd = forward_t<Real>(params, spec, batch);
  const Offsets off = compute_offsets(spec);
  const int B = batch.size();
  const int d = spec.feature_dim;
  const std::span<const Real> feats(fwd.features);

  StepResult<Real> res;
  res.grads.assign(params.size(), Real(0));
  std::vector<double> dfeat(static_cast<std::size_t>(B) * d, 0.0);

  for (const LossTerm& term : terms) {
    double term_loss = 0.0;
    if (const auto* ce = std::get_if<CrossEntropyTerm>(&term)) {
      if (static_cast<int>(ce->labels.size()) != B) throw ShapeMismatch("cross_entropy labels do not match batch size");
      int counted = 0;
      for (int b = 0; b < B; ++b) counted += ce->labels[b] >= 0 ? 1 : 0;
      if (counted > 0) {
        for (int b = 0; b < B; ++b) {
          const int y = ce->labels[b];
          if (y < 0) continue;
          const auto& lg = fwd.logits[b];
          if (y >= static_cast<int>(lg.size())) throw ShapeMismatch("cross_entropy label outside head range");
          std::vector<double> z(lg.begin(), lg.end());
          const std::vector<double> p = softmax_t(z, 1.0);
          term_loss += -std::log(std::max(p[y], std::numeric_limits<double>::min()));
          std::vector<double> g(p.size());
          for (std::size_t o = 0; o < p.size(); ++o) {
            g[o] = ce->weight * (p[o] - (static_cast<int>(o) == y ? 1.0 : 0.0)) / counted;
          }
          add_head_backward<Real>(off, spec, spec.head_index(batch.heads[b]), params, feats, b, g, dfeat, res.grads);
        }
        term_loss = ce->weight * term_loss / counted;
      }
    } else if (const auto* kd = std::get_if<DistillationTerm>(&term)) {
      const std::size_t h = spec.head_index(kd->head_id);
      const int nout = spec.heads[h].n_outputs;
      if (kd->teacher_logits.size() != static_cast<std::size_t>(B) * nout) {
        throw ShapeMismatch("teacher logits do not match batch x head outputs");
      }
      if (!(kd->temperature > 0.0)) throw ShapeMismatch("distillation temperature must be positive");
      std::vector<int> outs = kd->outputs;
      if (outs.empty()) {
        outs.resize(static_cast<std::size_t>(nout));
        for (int o = 0; o < nout; ++o) outs[o] = o;
      }
      const std::vector<Real> student = head_logits_t<Real>(params, spec, feats, kd->head_id);
      const double T = kd->temperature;
      for (int b = 0; b < B; ++b) {
        std::vector<double> zt(outs.size()), zs(outs.size());
        for (std::size_t i = 0; i < outs.size(); ++i) {
          zt[i] = kd->teacher_logits[static_cast<std::size_t>(b) * nout + outs[i]];
          zs[i] = static_cast<double>(student[static_cast<std::size_t>(b) * nout + outs[i]]);
        }
        const auto p = softmax_t(zt, T);
        const auto q = softmax_t(zs, T);
        term_loss += T * T * kl_divergence(p, q);
        std::vector<double> g(static_cast<std::size_t>(nout), 0.0);
        for (std::size_t i = 0; i < outs.size(); ++i) g[outs[i]] = kd->weight * T * (q[i] - p[i]) / B;
        add_head_backward<Real>(off, spec, h, params, feats, b, g, dfeat, res.grads);
      }
      term_loss = kd->weight * term_loss / B;
    } else if (const auto* ewc = std::get_if<EwcPenaltyTerm>(&term)) {
      if (!ewc->anchor || !ewc->fisher || ewc->anchor->size() != params.size() || ewc->fisher->size() != params.size()) {
        throw ShapeMismatch("ewc anchor/fisher must match the parameter vector");
      }
      const auto& a = *ewc->anchor;
      const auto& f = *ewc->fisher;
      double acc = 0.0;
      for (std::size_t j = 0; j < params.size(); ++j) {
        const double diff = static_cast<double>(params[j]) - static_cast<double>(a[j]);
        acc += static_cast<double>(f[j]) * diff * diff;
        res.grads[j] += static_cast<Real>(ewc->lambda * static_cast<double>(f[j]) * diff);
      }
      term_loss = 0.5 * ewc->lambda * acc;
    } else if (const auto* ppp = std::get_if<PrototypeTerm>(&term)) {
      if (static_cast<int>(ppp->targets.size()) != B) throw ShapeMismatch("prototype targets do not match batch size");
      if (ppp->prototypes.size() % static_cast<std::size_t>(d) != 0) throw ShapeMismatch("prototype width must equal feature_dim");
      if (!(ppp->tau > 0.0)) throw ShapeMismatch("prototype temperature must be positive");
      const std::size_t K = ppp->prototypes.size() / static_cast<std::size_t>(d);
      int counted = 0;
      for (int b = 0; b < B; ++b) counted += ppp->targets[b] >= 0 ? 1 : 0;
      if (counted > 0) {
        for (int b = 0; b < B; ++b) {
          const int t = ppp->targets[b];
          if (t < 0) continue;
          if (static_cast<std::size_t>(t) >= K) throw ShapeMismatch("prototype target out of range");
          const Real* f = feats.data() + static_cast<std::size_t>(b) * d;
          double nrm = 0.0;
          for (int j = 0; j < d; ++j) nrm += static_cast<double>(f[j]) * f[j];
          nrm = std::sqrt(nrm);
          const double inv = nrm > 1e-12 ? 1.0 / nrm : 0.0;
          std::vector<double> z(static_cast<std::size_t>(d));
          for (int j = 0; j < d; ++j) z[j] = static_cast<double>(f[j]) * inv;
          std::vector<double> s(K);
          for (std::size_t k = 0; k < K; ++k) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += z[j] * ppp->prototypes[k * d + j];
            s[k] = dot;
          }
          const auto prob = softmax_t(s, ppp->tau);
          term_loss += -std::log(std::max(prob[t], std::numeric_limits<double>::min()));
          if (inv == 0.0) continue;
          // dL/dz = sum_k (prob_k - [k==t]) p_k / tau
          std::vector<double> dz(static_cast<std::size_t>(d), 0.0);
          for (std::size_t k = 0; k < K; ++k) {
            const double g = (prob[k] - (static_cast<int>(k) == t ? 1.0 : 0.0)) / ppp->tau;
            for (int j = 0; j < d; ++j) dz[j] += g * ppp->prototypes[k * d + j];
          }
          double zdz = 0.0;
          for (int j = 0; j < d; ++j) zdz += z[j] * dz[j];
          double* df = dfeat.data() + static_cast<std::size_t>(b) * d;
          const double scale = ppp->weight / counted;
          for (int j = 0; j < d; ++j) df[j] += scale * (dz[j] - z[j] * zdz) * inv;
        }
        term_loss = ppp->weight * term_loss / counted;
      }
    }
    res.term_losses.push_back(term_loss);
    res.loss += term_loss;
  }
  if (!std::isfinite(res.loss)) throw NonFiniteLoss("loss evaluated to " + std::to_string(res.loss));

  backward_backbone<Real>(params, spec, off, *fwd.cache, dfeat, res.grads);
  res.features = fwd.features;
  return res;
}

template <typename Real>
std::vector<std::uint32_t> activation_signature(const ForwardCache<Real>& cache) {
  std::vector<std::uint32_t> sig;
  for (const auto& bc : cache.blocks) {
    std::uint32_t word = 0;
    int bit = 0;
    for (Real a : bc.activation) {
      word |= (a > Real(0) ? 1u : 0u) << bit;
      if (++bit == 32) {
        sig.push_back(word);
        word = 0;
        bit = 0;
      }
    }
    if (bit) sig.push_back(word);
    sig.insert(sig.end(), bc.pool_argmax.begin(), bc.pool_argmax.end());
  }
  return sig;
}

template BatchOutputT<float> forward_t<float>(std::span<const float>, const ModelSpec&, const Batch&);
template BatchOutputT<double> forward_t<double>(std::span<const double>, const ModelSpec&, const Batch&);
template std::vector<float> head_logits_t<float>(std::span<const float>, const ModelSpec&, std::span<const float>, int);
template std::vector<double> head_logits_t<double>(std::span<const double>, const ModelSpec&, std::span<const double>, int);
template StepResult<float> loss_and_backward_t<float>(std::span<const float>, const ModelSpec&, const Batch&,
                                                      std::span<const LossTerm>);
template StepResult<double> loss_and_backward_t<double>(std::span<const double>, const ModelSpec&, const Batch&,
                                                        std::span<const LossTerm>);
template std::vector<std::uint32_t> activation_signature<float>(const ForwardCache<float>&);
template std::vector<std::uint32_t> activation_signature<double>(const ForwardCache<double>&);

BatchOutput forward(const ParamVector& params, const ModelSpec& spec, const Batch& batch) {
  return forward_t<float>(params.values, spec, batch);
}

BatchOutput forward(const ParamVector& params, const ModelSpec& spec, Batch batch, int head_id) {
  std::fill(batch.heads.begin(), batch.heads.end(), head_id);
  return forward_t<float>(params.values, spec, batch);
}

std::vector<float> head_logits(const ParamVector& params, const ModelSpec& spec, std::span<const float> features,
                               int head_id) {
  return head_logits_t<float>(params.values, spec, features, head_id);
}

StepResult<float> loss_and_backward(const ParamVector& params, const ModelSpec& spec, const Batch& batch,
                                    std::span<const LossTerm> terms) {
  return loss_and_backward_t<float>(params.values, spec, batch, terms);
}

std::string_view loss_term_name(const LossTerm& term) {
  static constexpr std::array<std::string_view, 4> kNames{"cross_entropy", "distillation", "ewc_penalty",
                                                          "prototype_ppp"};
  return kNames[term.index()];
}

std::size_t loss_term_index(std::string_view name) {
  if (name == "cross_entropy") return 0;
  if (name == "distillation") return 1;
  if (name == "ewc_penalty") return 2;
  if (name == "prototype_ppp") return 3;
  throw UnknownTerm("unknown loss term '" + std::string(name) + "'");
}

std::vector<double> softmax_t(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], std::numeric_limits<double>::min())));
  }
  return kl;
}

int nearest_mean_classify(std::span<const float> feature, std::span<const ClassMean> means) {
  if (means.empty()) throw ShapeMismatch("nearest_mean_classify needs at least one class mean");
  int best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (const auto& m : means) {
    if (m.mean.size() != feature.size()) throw ShapeMismatch("class mean width differs from feature width");
    double dist = 0.0;
    for (std::size_t j = 0; j < feature.size(); ++j) {
      const double diff = static_cast<double>(feature[j]) - m.mean[j];
      dist += diff * diff;
    }
    if (dist < best_dist || (dist == best_dist && m.class_id < best)) {
      best_dist = dist;
      best = m.class_id;
    }
  }
  return best;
}

void l2_normalize(std::span<float> v) {
  double n = 0.0;
  for (float x : v) n += static_cast<double>(x) * x;
  n = std::sqrt(n);
  if (n <= 0.0) return;
  for (float& x : v) x = static_cast<float>(x / n);
}

}  // namespace histocl::nn
