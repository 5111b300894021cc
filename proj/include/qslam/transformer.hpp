#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qslam/common.hpp"
#include "qslam/rng.hpp"

namespace qslam {

struct TransformerConfig {
  int feat_dim = 32;       // token width D
  int sem_dim = 16;        // segment embedding width
  int n_heads = 4;
  int pe_bands = 8;        // frequency bands for xyz and view-dir encodings
  int n_classes = 8;       // semantic output classes
  int n_segment_ids = 64;  // segment embedding rows; id 0 is pinned to zero
  int max_rays = 64;       // rays per forward chunk (inter-ray attention span)
  bool quadric_masking = false;  // restrict inter-ray attention to same segment
  double pos_scale = 4.0;  // xyz divided by this before encoding
  double t_scale = 10.0;   // sample depth divided by this before encoding

  void validate() const {
    require(feat_dim > 0 && sem_dim > 0 && pe_bands > 0, ErrorKind::InvalidInput,
            "transformer dims must be positive");
    require(n_heads > 0 && feat_dim % n_heads == 0, ErrorKind::InvalidInput,
            "feat_dim must divide evenly into heads");
    // The depth encoding spends D/2 bands, the pixel encoding D/4 per axis.
    require(feat_dim % 4 == 0, ErrorKind::InvalidInput,
            "feat_dim must be a multiple of 4");
    require(n_classes >= 1 && n_segment_ids >= 1 && max_rays >= 1,
            ErrorKind::InvalidInput, "bad transformer config");
    require(pos_scale > 0.0 && t_scale > 0.0, ErrorKind::InvalidInput,
            "encoding scales must be positive");
  }
};

/// Flat parameter/gradient storage with named matrix views. Keeping one
/// contiguous buffer makes the optimizer, finite-difference checks and
/// checkpointing trivial.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    int offset = 0;
    int rows = 0;
    int cols = 0;
  };

  int add(const std::string& name, int rows, int cols) {
    require(rows > 0 && cols > 0, ErrorKind::InvalidInput,
            "parameter shapes must be positive");
    Entry e{name, static_cast<int>(values_.size()), rows, cols};
    entries_.push_back(e);
    values_.resize(values_.size() + static_cast<size_t>(rows) * cols, 0.0);
    grads_.resize(values_.size(), 0.0);
    return static_cast<int>(entries_.size()) - 1;
  }

  Eigen::Map<Eigen::MatrixXd> value(int id) {
    const Entry& e = entries_[id];
    return {values_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const Eigen::MatrixXd> value(int id) const {
    const Entry& e = entries_[id];
    return {values_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<Eigen::MatrixXd> grad(int id) {
    const Entry& e = entries_[id];
    return {grads_.data() + e.offset, e.rows, e.cols};
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& grads() { return grads_; }
  const std::vector<double>& grads() const { return grads_; }
  size_t size() const { return values_.size(); }

  void zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

 private:
  std::vector<Entry> entries_;
  std::vector<double> values_;
  std::vector<double> grads_;
};

// ---- encodings and small layers ----

/// Sinusoidal features: for every input column x and band k,
/// (sin(2^k pi x), cos(2^k pi x)). Output width = 2 * bands * cols.
inline Eigen::MatrixXd pe_forward(const Eigen::MatrixXd& x, int bands) {
  const double pi = 3.14159265358979323846;
  Eigen::MatrixXd out(x.rows(), 2 * bands * x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    for (int k = 0; k < bands; ++k) {
      double f = std::pow(2.0, k) * pi;
      int base = j * 2 * bands + 2 * k;
      out.col(base) = (f * x.col(j).array()).sin();
      out.col(base + 1) = (f * x.col(j).array()).cos();
    }
  }
  return out;
}

inline Eigen::MatrixXd pe_backward(const Eigen::MatrixXd& x, int bands,
                                   const Eigen::MatrixXd& d_out) {
  const double pi = 3.14159265358979323846;
  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    for (int k = 0; k < bands; ++k) {
      double f = std::pow(2.0, k) * pi;
      int base = j * 2 * bands + 2 * k;
      dx.col(j).array() += f * ((f * x.col(j).array()).cos() *
                                    d_out.col(base).array() -
                                (f * x.col(j).array()).sin() *
                                    d_out.col(base + 1).array());
    }
  }
  return dx;
}

namespace nn {

inline Eigen::MatrixXd linear(const Eigen::MatrixXd& x,
                              const Eigen::Ref<const Eigen::MatrixXd>& w,
                              const Eigen::Ref<const Eigen::MatrixXd>& b) {
  return (x * w).rowwise() + b.row(0);
}

/// dX for Y = X W + b; accumulates dW and db.
inline Eigen::MatrixXd linear_backward(const Eigen::MatrixXd& x,
                                       const Eigen::Ref<const Eigen::MatrixXd>& w,
                                       const Eigen::MatrixXd& d_y,
                                       Eigen::Ref<Eigen::MatrixXd> d_w,
                                       Eigen::Ref<Eigen::MatrixXd> d_b) {
  d_w += x.transpose() * d_y;
  d_b.row(0) += d_y.colwise().sum();
  return d_y * w.transpose();
}

inline Eigen::MatrixXd tanh_backward(const Eigen::MatrixXd& y_post,
                                     const Eigen::MatrixXd& d_y) {
  return d_y.array() * (1.0 - y_post.array().square());
}

inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace nn

// ---- multi-head attention over one token block ----

struct MhaBlockCache {
  Eigen::MatrixXd X;  // T x D tokens this block attended over
  Eigen::MatrixXd Q, K, V, O;
  std::vector<Eigen::MatrixXd> A;  // per head, T x T row-stochastic
};

/// Y = concat_h(softmax(Q_h K_h^T / sqrt(dh)) V_h) Wo. When `seg` is given,
/// token i may only attend to tokens with the same segment id (itself is
/// always allowed).
inline Eigen::MatrixXd mha_block_forward(const Eigen::MatrixXd& x,
                                         const Eigen::Ref<const Eigen::MatrixXd>& wq,
                                         const Eigen::Ref<const Eigen::MatrixXd>& wk,
                                         const Eigen::Ref<const Eigen::MatrixXd>& wv,
                                         const Eigen::Ref<const Eigen::MatrixXd>& wo,
                                         int n_heads, MhaBlockCache& cache,
                                         const std::vector<int>* seg = nullptr) {
  int T = static_cast<int>(x.rows());
  int D = static_cast<int>(x.cols());
  int dh = D / n_heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.X = x;
  cache.Q = x * wq;
  cache.K = x * wk;
  cache.V = x * wv;
  cache.O.resize(T, D);
  cache.A.assign(n_heads, Eigen::MatrixXd());

  for (int h = 0; h < n_heads; ++h) {
    auto Qh = cache.Q.middleCols(h * dh, dh);
    auto Kh = cache.K.middleCols(h * dh, dh);
    auto Vh = cache.V.middleCols(h * dh, dh);
    Eigen::MatrixXd S = Qh * Kh.transpose() * inv_sqrt;
    if (seg) {
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j)
          if (i != j && (*seg)[i] != (*seg)[j]) S(i, j) = -1e30;
    }
    Eigen::MatrixXd& A = cache.A[h];
    A.resize(T, T);
    for (int i = 0; i < T; ++i) {
      double m = S.row(i).maxCoeff();
      Eigen::ArrayXd e = (S.row(i).array() - m).exp();
      A.row(i) = (e / e.sum()).matrix();
    }
    cache.O.middleCols(h * dh, dh) = A * Vh;
  }
  return cache.O * wo;
}

/// Gradient of mha_block_forward. Returns dX; accumulates weight grads.
inline Eigen::MatrixXd mha_block_backward(const Eigen::MatrixXd& d_y,
                                          const Eigen::Ref<const Eigen::MatrixXd>& wq,
                                          const Eigen::Ref<const Eigen::MatrixXd>& wk,
                                          const Eigen::Ref<const Eigen::MatrixXd>& wv,
                                          const Eigen::Ref<const Eigen::MatrixXd>& wo,
                                          int n_heads,
                                          const MhaBlockCache& cache,
                                          Eigen::Ref<Eigen::MatrixXd> d_wq,
                                          Eigen::Ref<Eigen::MatrixXd> d_wk,
                                          Eigen::Ref<Eigen::MatrixXd> d_wv,
                                          Eigen::Ref<Eigen::MatrixXd> d_wo) {
  int T = static_cast<int>(cache.X.rows());
  int D = static_cast<int>(cache.X.cols());
  int dh = D / n_heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  d_wo += cache.O.transpose() * d_y;
  Eigen::MatrixXd d_o = d_y * wo.transpose();

  Eigen::MatrixXd d_q(T, D), d_k(T, D), d_v(T, D);
  for (int h = 0; h < n_heads; ++h) {
    auto Qh = cache.Q.middleCols(h * dh, dh);
    auto Kh = cache.K.middleCols(h * dh, dh);
    auto Vh = cache.V.middleCols(h * dh, dh);
    const Eigen::MatrixXd& A = cache.A[h];
    Eigen::MatrixXd d_oh = d_o.middleCols(h * dh, dh);

    Eigen::MatrixXd d_a = d_oh * Vh.transpose();
    d_v.middleCols(h * dh, dh) = A.transpose() * d_oh;
    // Softmax jacobian per row: dS = A .* (dA - rowsum(dA .* A)).
    Eigen::VectorXd row_dot = (d_a.array() * A.array()).rowwise().sum();
    Eigen::MatrixXd d_s =
        A.array() * (d_a.array().colwise() - row_dot.array());
    d_q.middleCols(h * dh, dh) = d_s * Kh * inv_sqrt;
    d_k.middleCols(h * dh, dh) = d_s.transpose() * Qh * inv_sqrt;
  }

  d_wq += cache.X.transpose() * d_q;
  d_wk += cache.X.transpose() * d_k;
  d_wv += cache.X.transpose() * d_v;
  return d_q * wq.transpose() + d_k * wk.transpose() + d_v * wv.transpose();
}

// ---- the full model ----

/// One chunk of rays. Row r = b * N + n holds sample n of ray b.
struct TransformerInput {
  int B = 0;
  int N = 0;
  Eigen::MatrixXd points;       // (B*N) x 3, world coordinates
  Eigen::MatrixXd view_dirs;    // B x 3, unit world directions
  Eigen::MatrixXd t_values;     // B x N, depth along the ray
  Eigen::MatrixXd pixels_norm;  // B x 2, pixel coords scaled to [0, 1]
  std::vector<int> seg_ids;     // B

  void validate(const TransformerConfig& cfg) const {
    require(B > 0 && N > 0, ErrorKind::InvalidInput, "empty transformer input");
    require(points.rows() == static_cast<long>(B) * N && points.cols() == 3,
            ErrorKind::ContractViolation, "points shape mismatch");
    require(view_dirs.rows() == B && view_dirs.cols() == 3,
            ErrorKind::ContractViolation, "view_dirs shape mismatch");
    require(t_values.rows() == B && t_values.cols() == N,
            ErrorKind::ContractViolation, "t_values shape mismatch");
    require(pixels_norm.rows() == B && pixels_norm.cols() == 2,
            ErrorKind::ContractViolation, "pixels_norm shape mismatch");
    require(static_cast<int>(seg_ids.size()) == B,
            ErrorKind::ContractViolation, "seg_ids size mismatch");
    for (int id : seg_ids)
      require(id >= 0 && id < cfg.n_segment_ids, ErrorKind::InvalidInput,
              "segment id out of embedding range");
  }
};

struct TransformerParams {
  TransformerConfig cfg;
  ParamStore store;

  // Entry ids, in registration order.
  int field_w1, field_b1, field_w2, field_b2, field_w3, field_b3;
  int seg_embed;
  int intra_wq, intra_wk, intra_wv, intra_wo;
  int fuse_w1, fuse_b1, fuse_w2, fuse_b2;
  int inter_wq, inter_wk, inter_wv, inter_wo;
  int sigma_w, sigma_b;
  int rgb_w1, rgb_b1, rgb_w2, rgb_b2;
  int sem_w;

  explicit TransformerParams(const TransformerConfig& config, uint64_t seed = 7)
      : cfg(config) {
    cfg.validate();
    int D = cfg.feat_dim;
    int pe_dim = 6 * cfg.pe_bands;

    field_w1 = store.add("field_w1", pe_dim, D);
    field_b1 = store.add("field_b1", 1, D);
    field_w2 = store.add("field_w2", D, D);
    field_b2 = store.add("field_b2", 1, D);
    field_w3 = store.add("field_w3", D, D);
    field_b3 = store.add("field_b3", 1, D);
    seg_embed = store.add("seg_embed", cfg.n_segment_ids, cfg.sem_dim);
    intra_wq = store.add("intra_wq", D, D);
    intra_wk = store.add("intra_wk", D, D);
    intra_wv = store.add("intra_wv", D, D);
    intra_wo = store.add("intra_wo", D, D);
    fuse_w1 = store.add("fuse_w1", D + cfg.sem_dim, D);
    fuse_b1 = store.add("fuse_b1", 1, D);
    fuse_w2 = store.add("fuse_w2", D, D);
    fuse_b2 = store.add("fuse_b2", 1, D);
    inter_wq = store.add("inter_wq", D, D);
    inter_wk = store.add("inter_wk", D, D);
    inter_wv = store.add("inter_wv", D, D);
    inter_wo = store.add("inter_wo", D, D);
    sigma_w = store.add("sigma_w", D, 1);
    sigma_b = store.add("sigma_b", 1, 1);
    rgb_w1 = store.add("rgb_w1", D + pe_dim, D);
    rgb_b1 = store.add("rgb_b1", 1, D);
    rgb_w2 = store.add("rgb_w2", D, 3);
    rgb_b2 = store.add("rgb_b2", 1, 3);
    sem_w = store.add("sem_w", D, cfg.n_classes);

    init(seed);
  }

  /// Xavier-uniform weights, zero biases. Each entry draws from its own
  /// hashed stream so parameter values do not depend on how other entries
  /// are sized.
  void init(uint64_t seed) {
    for (size_t i = 0; i < store.entries().size(); ++i) {
      const ParamStore::Entry& e = store.entries()[i];
      auto v = store.value(static_cast<int>(i));
      if (e.name.find("_b") != std::string::npos) {
        v.setZero();  // bias rows start at zero
        continue;
      }
      SplitMix64 rng = stream_rng(seed, i);
      double bound = std::sqrt(6.0 / (e.rows + e.cols));
      for (int c = 0; c < e.cols; ++c)
        for (int r = 0; r < e.rows; ++r)
          v(r, c) = rng.uniform(-bound, bound);
      if (e.name == "seg_embed") v.row(0).setZero();  // background pinned
    }
  }
};

struct TransformerWorkspace {
  int B = 0, N = 0;
  Eigen::MatrixXd pe_x, f1, f2, f_sigma;
  Eigen::MatrixXd delta_p, x_intra;
  std::vector<MhaBlockCache> intra_cache;
  Eigen::MatrixXd f_prime, f_seg, fuse_in, fuse_h, f_dprime;
  Eigen::MatrixXd delta_pp;
  std::vector<MhaBlockCache> inter_cache;
  Eigen::MatrixXd f_final;
  Eigen::VectorXd sigma_pre, sigma;
  Eigen::MatrixXd pe_view, rgb_in, rgb_h, rgb;
  Eigen::MatrixXd logits;
};

struct InputGrads {
  Eigen::MatrixXd d_points;     // (B*N) x 3
  Eigen::MatrixXd d_view_dirs;  // B x 3
};

inline void transformer_forward(const TransformerParams& params,
                                const TransformerInput& in,
                                TransformerWorkspace& ws) {
  const TransformerConfig& cfg = params.cfg;
  in.validate(cfg);
  const ParamStore& st = params.store;
  int B = in.B, N = in.N, BN = B * N, D = cfg.feat_dim;
  ws.B = B;
  ws.N = N;

  // Per-sample geometric feature f_sigma from encoded position.
  ws.pe_x = pe_forward(in.points / cfg.pos_scale, cfg.pe_bands);
  ws.f1 = nn::linear(ws.pe_x, st.value(params.field_w1), st.value(params.field_b1))
              .array().tanh();
  ws.f2 = nn::linear(ws.f1, st.value(params.field_w2), st.value(params.field_b2))
              .array().tanh();
  ws.f_sigma =
      nn::linear(ws.f2, st.value(params.field_w3), st.value(params.field_b3));

  // Depth encoding: D/2 bands of the scalar sample depth give width D.
  Eigen::MatrixXd t_flat(BN, 1);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) t_flat(b * N + n, 0) = in.t_values(b, n);
  ws.delta_p = pe_forward(t_flat / cfg.t_scale, D / 2);

  // Intra-ray attention: each ray's N samples attend to each other.
  ws.x_intra = ws.f_sigma + ws.delta_p;
  ws.intra_cache.assign(B, MhaBlockCache{});
  ws.f_prime.resize(BN, D);
  for (int b = 0; b < B; ++b) {
    Eigen::MatrixXd y = mha_block_forward(
        ws.x_intra.middleRows(b * N, N), st.value(params.intra_wq),
        st.value(params.intra_wk), st.value(params.intra_wv),
        st.value(params.intra_wo), cfg.n_heads, ws.intra_cache[b]);
    ws.f_prime.middleRows(b * N, N) = ws.f_sigma.middleRows(b * N, N) + y;
  }

  // Fuse the segment embedding into every sample of the ray.
  ws.f_seg.resize(BN, cfg.sem_dim);
  auto embed = st.value(params.seg_embed);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) ws.f_seg.row(b * N + n) = embed.row(in.seg_ids[b]);
  ws.fuse_in.resize(BN, D + cfg.sem_dim);
  ws.fuse_in << ws.f_prime, ws.f_seg;
  ws.fuse_h =
      nn::linear(ws.fuse_in, st.value(params.fuse_w1), st.value(params.fuse_b1))
          .array().tanh();
  ws.f_dprime =
      nn::linear(ws.fuse_h, st.value(params.fuse_w2), st.value(params.fuse_b2));

  // Pixel-location encoding: D/4 bands per image axis give width D.
  ws.delta_pp = pe_forward(in.pixels_norm, D / 4);

  // Inter-ray attention: sample n of every ray attends across rays.
  ws.inter_cache.assign(N, MhaBlockCache{});
  ws.f_final.resize(BN, D);
  const std::vector<int>* seg_mask = cfg.quadric_masking ? &in.seg_ids : nullptr;
  Eigen::MatrixXd x_blk(B, D);
  for (int n = 0; n < N; ++n) {
    for (int b = 0; b < B; ++b)
      x_blk.row(b) = ws.f_dprime.row(b * N + n) + ws.delta_pp.row(b);
    Eigen::MatrixXd y = mha_block_forward(
        x_blk, st.value(params.inter_wq), st.value(params.inter_wk),
        st.value(params.inter_wv), st.value(params.inter_wo), cfg.n_heads,
        ws.inter_cache[n], seg_mask);
    for (int b = 0; b < B; ++b)
      ws.f_final.row(b * N + n) = ws.f_dprime.row(b * N + n) + y.row(b);
  }

  // Density head.
  ws.sigma_pre = (ws.f_final * st.value(params.sigma_w)).col(0);
  ws.sigma_pre.array() += st.value(params.sigma_b)(0, 0);
  ws.sigma.resize(BN);
  for (int i = 0; i < BN; ++i) ws.sigma(i) = nn::softplus(ws.sigma_pre(i));

  // Color head conditions on the viewing direction.
  ws.pe_view = pe_forward(in.view_dirs, cfg.pe_bands);
  ws.rgb_in.resize(BN, D + 6 * cfg.pe_bands);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n)
      ws.rgb_in.row(b * N + n) << ws.f_final.row(b * N + n), ws.pe_view.row(b);
  ws.rgb_h =
      nn::linear(ws.rgb_in, st.value(params.rgb_w1), st.value(params.rgb_b1))
          .array().tanh();
  Eigen::MatrixXd rgb_pre =
      nn::linear(ws.rgb_h, st.value(params.rgb_w2), st.value(params.rgb_b2));
  ws.rgb.resize(BN, 3);
  for (int i = 0; i < BN; ++i)
    for (int j = 0; j < 3; ++j) ws.rgb(i, j) = nn::sigmoid(rgb_pre(i, j));

  // Per-sample semantic logits; rendering aggregates them along the ray.
  ws.logits = ws.f_final * st.value(params.sem_w);
}

/// Accumulates parameter gradients in params.store. When `input_grads` is
/// non-null, also returns gradients w.r.t. sample points and view dirs,
/// which is what the pose optimizer chains through.
inline void transformer_backward(TransformerParams& params,
                                 const TransformerInput& in,
                                 const TransformerWorkspace& ws,
                                 const Eigen::VectorXd& d_sigma,
                                 const Eigen::MatrixXd& d_rgb,
                                 const Eigen::MatrixXd& d_logits,
                                 InputGrads* input_grads = nullptr) {
  const TransformerConfig& cfg = params.cfg;
  ParamStore& st = params.store;
  int B = ws.B, N = ws.N, BN = B * N, D = cfg.feat_dim;
  require(d_sigma.size() == BN && d_rgb.rows() == BN && d_logits.rows() == BN,
          ErrorKind::ContractViolation, "gradient shape mismatch");

  Eigen::MatrixXd d_final = Eigen::MatrixXd::Zero(BN, D);

  // Semantic head.
  st.grad(params.sem_w) += ws.f_final.transpose() * d_logits;
  d_final += d_logits * st.value(params.sem_w).transpose();

  // Color head.
  Eigen::MatrixXd d_rgb_pre =
      d_rgb.array() * ws.rgb.array() * (1.0 - ws.rgb.array());
  Eigen::MatrixXd d_rgb_h = nn::linear_backward(
      ws.rgb_h, st.value(params.rgb_w2), d_rgb_pre, st.grad(params.rgb_w2),
      st.grad(params.rgb_b2));
  Eigen::MatrixXd d_rgb_in = nn::linear_backward(
      ws.rgb_in, st.value(params.rgb_w1), nn::tanh_backward(ws.rgb_h, d_rgb_h),
      st.grad(params.rgb_w1), st.grad(params.rgb_b1));
  d_final += d_rgb_in.leftCols(D);
  Eigen::MatrixXd d_pe_view = Eigen::MatrixXd::Zero(B, 6 * cfg.pe_bands);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n)
      d_pe_view.row(b) += d_rgb_in.row(b * N + n).tail(6 * cfg.pe_bands);

  // Density head.
  Eigen::VectorXd d_sigma_pre(BN);
  for (int i = 0; i < BN; ++i)
    d_sigma_pre(i) = d_sigma(i) * nn::sigmoid(ws.sigma_pre(i));
  st.grad(params.sigma_w) += ws.f_final.transpose() * d_sigma_pre;
  st.grad(params.sigma_b)(0, 0) += d_sigma_pre.sum();
  d_final += d_sigma_pre * st.value(params.sigma_w).transpose();

  // Inter-ray attention. X' = f'' + delta_pp, out = f'' + attn(X').
  Eigen::MatrixXd d_dprime = Eigen::MatrixXd::Zero(BN, D);
  Eigen::MatrixXd d_y_blk(B, D);
  for (int n = 0; n < N; ++n) {
    for (int b = 0; b < B; ++b) d_y_blk.row(b) = d_final.row(b * N + n);
    Eigen::MatrixXd d_x_blk = mha_block_backward(
        d_y_blk, st.value(params.inter_wq), st.value(params.inter_wk),
        st.value(params.inter_wv), st.value(params.inter_wo), cfg.n_heads,
        ws.inter_cache[n], st.grad(params.inter_wq), st.grad(params.inter_wk),
        st.grad(params.inter_wv), st.grad(params.inter_wo));
    for (int b = 0; b < B; ++b)
      d_dprime.row(b * N + n) = d_final.row(b * N + n) + d_x_blk.row(b);
  }

  // Fusion MLP back to f' and the segment embedding.
  Eigen::MatrixXd d_fuse_h = nn::linear_backward(
      ws.fuse_h, st.value(params.fuse_w2), d_dprime, st.grad(params.fuse_w2),
      st.grad(params.fuse_b2));
  Eigen::MatrixXd d_fuse_in = nn::linear_backward(
      ws.fuse_in, st.value(params.fuse_w1),
      nn::tanh_backward(ws.fuse_h, d_fuse_h), st.grad(params.fuse_w1),
      st.grad(params.fuse_b1));
  Eigen::MatrixXd d_prime = d_fuse_in.leftCols(D);
  auto d_embed = st.grad(params.seg_embed);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n)
      d_embed.row(in.seg_ids[b]) += d_fuse_in.row(b * N + n).tail(cfg.sem_dim);
  d_embed.row(0).setZero();  // id 0 stays pinned

  // Intra-ray attention. X = f_sigma + delta_p, out = f_sigma + attn(X).
  Eigen::MatrixXd d_f_sigma = d_prime;
  for (int b = 0; b < B; ++b) {
    Eigen::MatrixXd d_x_blk = mha_block_backward(
        d_prime.middleRows(b * N, N), st.value(params.intra_wq),
        st.value(params.intra_wk), st.value(params.intra_wv),
        st.value(params.intra_wo), cfg.n_heads, ws.intra_cache[b],
        st.grad(params.intra_wq), st.grad(params.intra_wk),
        st.grad(params.intra_wv), st.grad(params.intra_wo));
    d_f_sigma.middleRows(b * N, N) += d_x_blk;
  }

  // Field MLP back to the encoded points.
  Eigen::MatrixXd d_f2 = nn::linear_backward(
      ws.f2, st.value(params.field_w3), d_f_sigma, st.grad(params.field_w3),
      st.grad(params.field_b3));
  Eigen::MatrixXd d_f1 = nn::linear_backward(
      ws.f1, st.value(params.field_w2), nn::tanh_backward(ws.f2, d_f2),
      st.grad(params.field_w2), st.grad(params.field_b2));
  Eigen::MatrixXd d_pe_x = nn::linear_backward(
      ws.pe_x, st.value(params.field_w1), nn::tanh_backward(ws.f1, d_f1),
      st.grad(params.field_w1), st.grad(params.field_b1));

  if (input_grads) {
    input_grads->d_points =
        pe_backward(in.points / cfg.pos_scale, cfg.pe_bands, d_pe_x) /
        cfg.pos_scale;
    input_grads->d_view_dirs = pe_backward(in.view_dirs, cfg.pe_bands, d_pe_view);
  }
}

}  // namespace qslam
