#pragma once

#include "lidarseg/norm.hpp"
#include "lidarseg/types.hpp"

#include <array>
#include <string>
#include <vector>

namespace lidarseg {

enum class NormKind { batch, layer };
enum class Mode { train, eval };

struct ArchConfig {
  int width = 64;
  int depth = 4;
  NormKind norm = NormKind::layer;
  bool use_intensity = false;
  Real grid_res = 1.0;       // cell size of the 2D mixing grids, meters
  int feature_dim_out = 16;  // distillation head output size

  int input_dim() const { return use_intensity ? 4 : 3; }
};

void validate(const ArchConfig& cfg);

// gamma/beta always present; running statistics only when norm = batch.
struct NormParams {
  VecX gamma, beta;
  VecX running_mean, running_var;
};

struct MixLayerParams {
  NormParams norm1;
  MatX conv_w;  // width x 9, one 3x3 kernel per channel
  VecX conv_b;
  NormParams norm2;
  MatX w1;  // width x width
  VecX b1;
  MatX w2;  // width x width
  VecX b2;
};

// Parameter groups (for freezing, weight decay and layerwise rates):
// group 0 = embed, 1..depth = mixing layers, depth+1 = output norm.
struct BackboneParams {
  ArchConfig cfg;
  MatX embed_w;  // width x input_dim
  VecX embed_b;
  std::vector<MixLayerParams> layers;
  NormParams out_norm;
  std::vector<std::uint8_t> frozen;

  int num_groups() const { return cfg.depth + 2; }
};

BackboneParams init_params(const ArchConfig& cfg, std::uint64_t seed);
BackboneParams zeros_like(const BackboneParams& params);

// Learnable tensors in a fixed order; running statistics are buffers and
// visited separately. Works for const and mutable params.
template <class Params, class Fn>
void visit_tensors(Params& p, Fn&& fn) {
  fn(0, "embed.w", p.embed_w.data(), p.embed_w.size());
  fn(0, "embed.b", p.embed_b.data(), p.embed_b.size());
  for (int l = 0; l < static_cast<int>(p.layers.size()); ++l) {
    auto& layer = p.layers[static_cast<std::size_t>(l)];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const int g = 1 + l;
    fn(g, prefix + "norm1.gamma", layer.norm1.gamma.data(), layer.norm1.gamma.size());
    fn(g, prefix + "norm1.beta", layer.norm1.beta.data(), layer.norm1.beta.size());
    fn(g, prefix + "conv.w", layer.conv_w.data(), layer.conv_w.size());
    fn(g, prefix + "conv.b", layer.conv_b.data(), layer.conv_b.size());
    fn(g, prefix + "norm2.gamma", layer.norm2.gamma.data(), layer.norm2.gamma.size());
    fn(g, prefix + "norm2.beta", layer.norm2.beta.data(), layer.norm2.beta.size());
    fn(g, prefix + "mlp.w1", layer.w1.data(), layer.w1.size());
    fn(g, prefix + "mlp.b1", layer.b1.data(), layer.b1.size());
    fn(g, prefix + "mlp.w2", layer.w2.data(), layer.w2.size());
    fn(g, prefix + "mlp.b2", layer.b2.data(), layer.b2.size());
  }
  const int g = static_cast<int>(p.layers.size()) + 1;
  fn(g, "out_norm.gamma", p.out_norm.gamma.data(), p.out_norm.gamma.size());
  fn(g, "out_norm.beta", p.out_norm.beta.data(), p.out_norm.beta.size());
}

template <class Params, class Fn>
void visit_buffers(Params& p, Fn&& fn) {
  if (p.cfg.norm != NormKind::batch) return;
  for (int l = 0; l < static_cast<int>(p.layers.size()); ++l) {
    auto& layer = p.layers[static_cast<std::size_t>(l)];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    fn(prefix + "norm1.running_mean", layer.norm1.running_mean.data(), layer.norm1.running_mean.size());
    fn(prefix + "norm1.running_var", layer.norm1.running_var.data(), layer.norm1.running_var.size());
    fn(prefix + "norm2.running_mean", layer.norm2.running_mean.data(), layer.norm2.running_mean.size());
    fn(prefix + "norm2.running_var", layer.norm2.running_var.data(), layer.norm2.running_var.size());
  }
  fn("out_norm.running_mean", p.out_norm.running_mean.data(), p.out_norm.running_mean.size());
  fn("out_norm.running_var", p.out_norm.running_var.data(), p.out_norm.running_var.size());
}

std::int64_t parameter_count(const BackboneParams& params);

// Hash over learnable tensors and buffers; used by the freezing contracts.
std::uint64_t parameter_hash(const BackboneParams& params);

// depth-from-top per group for layerwise learning-rate decay; the head
// (not part of the backbone) sits at depth 0.
int group_depth_from_top(const BackboneParams& params, int group);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct GridIndex {
  std::vector<int> cell_of_point;               // per point
  std::vector<std::array<int, 9>> neighbors;    // per cell, -1 where absent
  std::vector<int> counts;                      // per cell
  int n_cells = 0;
};

struct NormSiteCache {
  LayerNormCache<Real> ln;
  BatchNormCache<Real> bn;
};

struct MixLayerCache {
  NormSiteCache nc1, nc2;
  MatX grid_mean;   // scatter-mean result, cells x width
  MatX grid_act;    // conv output before relu
  MatX mlp_in;      // norm2 output
  MatX hidden_pre;  // first mlp affine before relu
};

struct BackboneCache {
  MatX input_feats;
  GridIndex grid;
  std::vector<MixLayerCache> layers;
  NormSiteCache out_nc;
  std::vector<Eigen::Index> cloud_offsets;  // size batch+1
  // batch statistics per norm site (norm=batch, train mode), in site order
  // layer0.norm1, layer0.norm2, ..., out_norm
  std::vector<std::pair<VecX, VecX>> batch_stats;
};

// Optional accumulator of raw batch-norm inputs across forward passes;
// drives statistic recalibration and its test oracle.
struct BnCapture {
  std::vector<VecX> sum;
  std::vector<VecX> sum_sq;
  std::vector<std::int64_t> count;
  bool keep_raw = false;
  std::vector<std::vector<MatX>> raw;  // per site, per pass
};

// Per-point input features: height above the cloud's lowest point, range,
// local grid density, optionally intensity. One output row per point.
MatX backbone_forward(const BackboneParams& params, const std::vector<const PointCloud*>& batch,
                      Mode mode, BackboneCache* cache = nullptr, BnCapture* capture = nullptr);

// Single-cloud convenience wrapper.
MatX backbone_forward(const BackboneParams& params, const PointCloud& cloud, Mode mode,
                      BackboneCache* cache = nullptr);

void backbone_backward(const BackboneParams& params, const BackboneCache& cache,
                       const MatX& grad_out, BackboneParams& grads);

// Running-statistic EMA update after a train-mode forward (momentum 0.9:
// running <- 0.9 running + 0.1 batch).
void commit_batch_stats(BackboneParams& params, const BackboneCache& cache, Real momentum = 0.9);

// AdaBN-style baseline: recompute the running statistics over the given
// frames (normalizing with the old statistics); weights stay untouched.
BackboneParams recalibrate_batchnorm(const BackboneParams& params,
                                     const std::vector<const PointCloud*>& target_frames);

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

enum class HeadKind { linear_bn, mlp2, distill_proj };

struct HeadParams {
  HeadKind kind = HeadKind::mlp2;
  NormParams bn;  // linear_bn only
  MatX w1;        // first (or only) affine
  VecX b1;
  MatX w2;  // mlp2 second affine
  VecX b2;
  bool frozen = false;

  int out_dim() const { return static_cast<int>(kind == HeadKind::mlp2 ? w2.rows() : w1.rows()); }
};

HeadParams init_head(HeadKind kind, int in_dim, int out_dim, std::uint64_t seed);
HeadParams zeros_like(const HeadParams& head);

template <class Params, class Fn>
void visit_head_tensors(Params& h, Fn&& fn) {
  if (h.kind == HeadKind::linear_bn) {
    fn(0, "head.bn.gamma", h.bn.gamma.data(), h.bn.gamma.size());
    fn(0, "head.bn.beta", h.bn.beta.data(), h.bn.beta.size());
  }
  fn(0, "head.w1", h.w1.data(), h.w1.size());
  fn(0, "head.b1", h.b1.data(), h.b1.size());
  if (h.kind == HeadKind::mlp2) {
    fn(0, "head.w2", h.w2.data(), h.w2.size());
    fn(0, "head.b2", h.b2.data(), h.b2.size());
  }
}

std::uint64_t parameter_hash(const HeadParams& head);

struct HeadCache {
  MatX input;
  BatchNormCache<Real> bn;
  MatX bn_out;
  MatX hidden_pre;
};

MatX head_forward(const HeadParams& head, const MatX& feats, Mode mode, HeadCache* cache = nullptr);
void head_backward(const HeadParams& head, const HeadCache& cache, const MatX& grad_out,
                   HeadParams& grads, MatX* grad_feats = nullptr);
void commit_head_batch_stats(HeadParams& head, const HeadCache& cache, Real momentum = 0.9);

// Plain affine equivalent of a linear_bn head at inference time.
struct AffineLayer {
  MatX w;
  VecX b;

  MatX apply(const MatX& x) const {
    return (x * w.transpose()).rowwise() + b.transpose();
  }
};

AffineLayer fold_linear_head(const HeadParams& head);

}  // namespace lidarseg
