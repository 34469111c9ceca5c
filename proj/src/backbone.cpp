#include "lidarseg/backbone.hpp"

#include <unordered_map>

namespace lidarseg {

void validate(const ArchConfig& cfg) {
  require(cfg.width >= 8, "width must be at least 8");
  require(cfg.depth >= 1, "depth must be at least 1");
  require(cfg.grid_res > 0.0, "grid_res must be positive");
  require(cfg.feature_dim_out >= 1, "feature_dim_out must be positive");
}

namespace {

NormParams init_norm(int width, bool with_stats) {
  NormParams np;
  np.gamma = VecX::Ones(width);
  np.beta = VecX::Zero(width);
  if (with_stats) {
    np.running_mean = VecX::Zero(width);
    np.running_var = VecX::Ones(width);
  }
  return np;
}

// fan-in scaled uniform: U[-1/sqrt(fan_in), 1/sqrt(fan_in)]
MatX init_affine(Rng& rng, Eigen::Index out, Eigen::Index in) {
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(in));
  MatX w(out, in);
  for (Eigen::Index i = 0; i < out; ++i) {
    for (Eigen::Index j = 0; j < in; ++j) w(i, j) = rng.uniform(-bound, bound);
  }
  return w;
}

}  // namespace

BackboneParams init_params(const ArchConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(derive_seed(seed, fnv1a("init_params")));
  const bool stats = cfg.norm == NormKind::batch;
  const int c = cfg.width;

  BackboneParams p;
  p.cfg = cfg;
  p.embed_w = init_affine(rng, c, cfg.input_dim());
  p.embed_b = VecX::Zero(c);
  for (int l = 0; l < cfg.depth; ++l) {
    MixLayerParams layer;
    layer.norm1 = init_norm(c, stats);
    layer.conv_w = init_affine(rng, c, 9);
    layer.conv_b = VecX::Zero(c);
    layer.norm2 = init_norm(c, stats);
    layer.w1 = init_affine(rng, c, c);
    layer.b1 = VecX::Zero(c);
    layer.w2 = init_affine(rng, c, c);
    layer.b2 = VecX::Zero(c);
    p.layers.push_back(std::move(layer));
  }
  p.out_norm = init_norm(c, stats);
  p.frozen.assign(static_cast<std::size_t>(p.num_groups()), 0);
  return p;
}

BackboneParams zeros_like(const BackboneParams& params) {
  BackboneParams z = params;
  visit_tensors(z, [](int, const std::string&, Real* data, Eigen::Index size) {
    Eigen::Map<VecX>(data, size).setZero();
  });
  visit_buffers(z, [](const std::string&, Real* data, Eigen::Index size) {
    Eigen::Map<VecX>(data, size).setZero();
  });
  return z;
}

std::int64_t parameter_count(const BackboneParams& params) {
  std::int64_t n = 0;
  visit_tensors(params, [&](int, const std::string&, const Real*, Eigen::Index size) { n += size; });
  return n;
}

std::uint64_t parameter_hash(const BackboneParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  visit_tensors(params, [&](int, const std::string& name, const Real* data, Eigen::Index size) {
    h = fnv1a(name, h);
    h = fnv1a(data, static_cast<std::size_t>(size) * sizeof(Real), h);
  });
  visit_buffers(params, [&](const std::string& name, const Real* data, Eigen::Index size) {
    h = fnv1a(name, h);
    h = fnv1a(data, static_cast<std::size_t>(size) * sizeof(Real), h);
  });
  return h;
}

int group_depth_from_top(const BackboneParams& params, int group) {
  // out_norm sits just below the head; deeper layers increase the depth,
  // the embedding is deepest
  const int depth = params.cfg.depth;
  if (group == depth + 1) return 1;                    // out_norm
  if (group == 0) return depth + 2;                    // embed
  return 1 + (depth - group) + 1;                      // layer (group-1): top layer -> 2
}

// ---------------------------------------------------------------------------

namespace {

GridIndex build_grid(const std::vector<const PointCloud*>& batch, Real grid_res) {
  GridIndex grid;
  std::size_t total = 0;
  for (const PointCloud* c : batch) total += static_cast<std::size_t>(c->size());
  grid.cell_of_point.resize(total);

  std::vector<std::pair<int, int>> cell_coords;  // per cell, within current cloud
  std::size_t row = 0;
  for (const PointCloud* cloud : batch) {
    std::unordered_map<std::uint64_t, int> lookup;
    const int cell_base = grid.n_cells;
    std::vector<std::pair<int, int>> local_coords;
    for (Eigen::Index i = 0; i < cloud->size(); ++i, ++row) {
      const int ix = static_cast<int>(std::floor(cloud->xyz(i, 0) / grid_res));
      const int iy = static_cast<int>(std::floor(cloud->xyz(i, 1) / grid_res));
      const std::uint64_t key = pack_xy(ix, iy);
      auto [it, inserted] = lookup.emplace(key, grid.n_cells);
      if (inserted) {
        ++grid.n_cells;
        grid.counts.push_back(0);
        local_coords.emplace_back(ix, iy);
      }
      grid.cell_of_point[row] = it->second;
      ++grid.counts[static_cast<std::size_t>(it->second)];
    }
    // neighbor table for this cloud's cells
    for (std::size_t c = 0; c < local_coords.size(); ++c) {
      std::array<int, 9> nbr;
      int k = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx, ++k) {
          const auto it = lookup.find(pack_xy(local_coords[c].first + dx, local_coords[c].second + dy));
          nbr[static_cast<std::size_t>(k)] = it == lookup.end() ? -1 : it->second;
        }
      }
      grid.neighbors.push_back(nbr);
    }
    (void)cell_base;
  }
  return grid;
}

MatX input_features(const std::vector<const PointCloud*>& batch, const GridIndex& grid,
                    const ArchConfig& cfg) {
  std::size_t total = 0;
  for (const PointCloud* c : batch) total += static_cast<std::size_t>(c->size());
  MatX feats(static_cast<Eigen::Index>(total), cfg.input_dim());

  std::size_t row = 0;
  for (const PointCloud* cloud : batch) {
    const Real z_min = cloud->xyz.col(2).minCoeff();
    for (Eigen::Index i = 0; i < cloud->size(); ++i, ++row) {
      const Eigen::Index r = static_cast<Eigen::Index>(row);
      feats(r, 0) = (cloud->xyz(i, 2) - z_min) / 3.0;
      feats(r, 1) = cloud->xyz.row(i).norm() / 30.0;
      feats(r, 2) = std::log1p(static_cast<Real>(grid.counts[static_cast<std::size_t>(
                        grid.cell_of_point[row])])) / 3.0;
      if (cfg.use_intensity) {
        require(cloud->intensity.has_value(), "intensity required");
        feats(r, 3) = (*cloud->intensity)[i];
      }
    }
  }
  return feats;
}

MatX scatter_mean(const MatX& x, const GridIndex& grid) {
  MatX out = MatX::Zero(grid.n_cells, x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.row(grid.cell_of_point[static_cast<std::size_t>(i)]) += x.row(i);
  }
  for (int c = 0; c < grid.n_cells; ++c) {
    out.row(c) /= static_cast<Real>(grid.counts[static_cast<std::size_t>(c)]);
  }
  return out;
}

MatX grid_conv(const MatX& g, const GridIndex& grid, const MatX& w, const VecX& b) {
  MatX out(grid.n_cells, g.cols());
  out.rowwise() = b.transpose();
  for (int c = 0; c < grid.n_cells; ++c) {
    const auto& nbr = grid.neighbors[static_cast<std::size_t>(c)];
    for (int k = 0; k < 9; ++k) {
      if (nbr[static_cast<std::size_t>(k)] < 0) continue;
      out.row(c) += g.row(nbr[static_cast<std::size_t>(k)]).cwiseProduct(w.col(k).transpose());
    }
  }
  return out;
}

struct NormForwardCtx {
  Mode mode;
  NormKind kind;
  BackboneCache* cache;
  BnCapture* capture;
  int site = 0;
};

MatX norm_forward(NormForwardCtx& ctx, const NormParams& np, const MatX& x, NormSiteCache* nc) {
  const int site = ctx.site++;
  if (ctx.kind == NormKind::layer) {
    return layer_norm_forward(x, np.gamma, np.beta, nc ? &nc->ln : nullptr);
  }
  if (ctx.capture) {
    auto& cap = *ctx.capture;
    if (static_cast<int>(cap.sum.size()) <= site) {
      cap.sum.resize(static_cast<std::size_t>(site) + 1, VecX::Zero(x.cols()));
      cap.sum_sq.resize(static_cast<std::size_t>(site) + 1, VecX::Zero(x.cols()));
      cap.count.resize(static_cast<std::size_t>(site) + 1, 0);
      if (cap.keep_raw) cap.raw.resize(static_cast<std::size_t>(site) + 1);
    }
    cap.sum[static_cast<std::size_t>(site)] += x.colwise().sum().transpose();
    cap.sum_sq[static_cast<std::size_t>(site)] += x.array().square().colwise().sum().matrix().transpose();
    cap.count[static_cast<std::size_t>(site)] += x.rows();
    if (cap.keep_raw) cap.raw[static_cast<std::size_t>(site)].push_back(x);
  }
  if (ctx.mode == Mode::train) {
    MatX y = batch_norm_forward_train(x, np.gamma, np.beta, nc ? &nc->bn : nullptr);
    if (ctx.cache && nc) {
      ctx.cache->batch_stats.emplace_back(nc->bn.batch_mean, nc->bn.batch_var);
    }
    return y;
  }
  return batch_norm_forward_eval(x, np.gamma, np.beta, np.running_mean, np.running_var);
}

}  // namespace

MatX backbone_forward(const BackboneParams& params, const std::vector<const PointCloud*>& batch,
                      Mode mode, BackboneCache* cache, BnCapture* capture) {
  validate(params.cfg);
  require(!batch.empty(), "backbone_forward: empty batch");
  for (const PointCloud* c : batch) require(c->size() > 0, "backbone_forward: empty cloud");

  BackboneCache local;
  BackboneCache* cc = cache ? cache : &local;
  cc->batch_stats.clear();
  cc->layers.clear();

  cc->grid = build_grid(batch, params.cfg.grid_res);
  cc->input_feats = input_features(batch, cc->grid, params.cfg);
  cc->cloud_offsets.assign(1, 0);
  for (const PointCloud* c : batch) cc->cloud_offsets.push_back(cc->cloud_offsets.back() + c->size());

  NormForwardCtx ctx{mode, params.cfg.norm, cache ? cc : nullptr, capture, 0};

  MatX x = (cc->input_feats * params.embed_w.transpose()).rowwise() + params.embed_b.transpose();

  cc->layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const MixLayerParams& layer = params.layers[l];
    MixLayerCache& lc = cc->layers[l];

    // token mixing on the bird's-eye grid
    const MatX normed = norm_forward(ctx, layer.norm1, x, &lc.nc1);
    lc.grid_mean = scatter_mean(normed, cc->grid);
    lc.grid_act = grid_conv(lc.grid_mean, cc->grid, layer.conv_w, layer.conv_b);
    const MatX grid_relu = lc.grid_act.cwiseMax(0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      x.row(i) += grid_relu.row(cc->grid.cell_of_point[static_cast<std::size_t>(i)]);
    }

    // channel mixing
    lc.mlp_in = norm_forward(ctx, layer.norm2, x, &lc.nc2);
    lc.hidden_pre = (lc.mlp_in * layer.w1.transpose()).rowwise() + layer.b1.transpose();
    const MatX hidden = lc.hidden_pre.cwiseMax(0.0);
    x += (hidden * layer.w2.transpose()).rowwise() + layer.b2.transpose();
  }

  return norm_forward(ctx, params.out_norm, x, &cc->out_nc);
}

MatX backbone_forward(const BackboneParams& params, const PointCloud& cloud, Mode mode,
                      BackboneCache* cache) {
  return backbone_forward(params, std::vector<const PointCloud*>{&cloud}, mode, cache);
}

namespace {

// dispatches on the norm kind; returns grad wrt the norm input
MatX norm_backward_dispatch(NormKind kind, const NormParams& np, const NormSiteCache& nc,
                            const MatX& grad_y, VecX& grad_gamma, VecX& grad_beta) {
  MatX grad_x;
  if (kind == NormKind::layer) {
    layer_norm_backward(grad_y, np.gamma, nc.ln, grad_x, grad_gamma, grad_beta);
  } else {
    require(nc.bn.xhat.size() > 0, "backbone_backward needs a train-mode forward cache");
    batch_norm_backward(grad_y, np.gamma, nc.bn, grad_x, grad_gamma, grad_beta);
  }
  return grad_x;
}

}  // namespace

void backbone_backward(const BackboneParams& params, const BackboneCache& cache,
                       const MatX& grad_out, BackboneParams& grads) {
  const GridIndex& grid = cache.grid;

  MatX g = norm_backward_dispatch(params.cfg.norm, params.out_norm, cache.out_nc, grad_out,
                                  grads.out_norm.gamma, grads.out_norm.beta);

  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const MixLayerParams& layer = params.layers[static_cast<std::size_t>(l)];
    const MixLayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    MixLayerParams& gl = grads.layers[static_cast<std::size_t>(l)];

    // channel mixing: x_out = y + w2 relu(w1 u + b1) + b2, u = norm2(y)
    const MatX hidden = lc.hidden_pre.cwiseMax(0.0);
    gl.w2 += g.transpose() * hidden;
    gl.b2 += g.colwise().sum().transpose();
    MatX dhidden = g * layer.w2;
    dhidden = (lc.hidden_pre.array() > 0.0).select(dhidden, 0.0);
    gl.w1 += dhidden.transpose() * lc.mlp_in;
    gl.b1 += dhidden.colwise().sum().transpose();
    const MatX du = dhidden * layer.w1;
    MatX dy = norm_backward_dispatch(params.cfg.norm, layer.norm2, lc.nc2, du, gl.norm2.gamma,
                                     gl.norm2.beta);
    dy += g;  // residual

    // token mixing: y = x_in + gather(relu(conv(scatter_mean(norm1(x_in)))))
    MatX d_relu = MatX::Zero(grid.n_cells, dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      d_relu.row(grid.cell_of_point[static_cast<std::size_t>(i)]) += dy.row(i);
    }
    const MatX d_act = (lc.grid_act.array() > 0.0).select(d_relu, 0.0);
    gl.conv_b += d_act.colwise().sum().transpose();
    MatX d_grid = MatX::Zero(grid.n_cells, dy.cols());
    for (int c = 0; c < grid.n_cells; ++c) {
      const auto& nbr = grid.neighbors[static_cast<std::size_t>(c)];
      for (int k = 0; k < 9; ++k) {
        const int n = nbr[static_cast<std::size_t>(k)];
        if (n < 0) continue;
        d_grid.row(n) += d_act.row(c).cwiseProduct(layer.conv_w.col(k).transpose());
        gl.conv_w.col(k) += d_act.row(c).cwiseProduct(lc.grid_mean.row(n)).transpose();
      }
    }
    MatX da(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const int cell = grid.cell_of_point[static_cast<std::size_t>(i)];
      da.row(i) = d_grid.row(cell) / static_cast<Real>(grid.counts[static_cast<std::size_t>(cell)]);
    }
    const MatX dx = norm_backward_dispatch(params.cfg.norm, layer.norm1, lc.nc1, da, gl.norm1.gamma,
                                           gl.norm1.beta);
    g = dy + dx;
  }

  grads.embed_w += g.transpose() * cache.input_feats;
  grads.embed_b += g.colwise().sum().transpose();
}

void commit_batch_stats(BackboneParams& params, const BackboneCache& cache, Real momentum) {
  if (params.cfg.norm != NormKind::batch) return;
  require(cache.batch_stats.size() == params.layers.size() * 2 + 1,
          "commit_batch_stats: cache does not carry train-mode batch statistics");
  std::size_t site = 0;
  auto update = [&](NormParams& np) {
    np.running_mean = momentum * np.running_mean + (1.0 - momentum) * cache.batch_stats[site].first;
    np.running_var = momentum * np.running_var + (1.0 - momentum) * cache.batch_stats[site].second;
    ++site;
  };
  for (MixLayerParams& layer : params.layers) {
    update(layer.norm1);
    update(layer.norm2);
  }
  update(params.out_norm);
}

BackboneParams recalibrate_batchnorm(const BackboneParams& params,
                                     const std::vector<const PointCloud*>& target_frames) {
  require(params.cfg.norm == NormKind::batch, "no batchnorm to recalibrate");
  require(!target_frames.empty(), "recalibrate_batchnorm: no frames");

  BnCapture capture;
  for (const PointCloud* cloud : target_frames) {
    backbone_forward(params, {cloud}, Mode::eval, nullptr, &capture);
  }

  BackboneParams out = params;
  std::size_t site = 0;
  auto apply = [&](NormParams& np) {
    const Real n = static_cast<Real>(capture.count[site]);
    const VecX mean = capture.sum[site] / n;
    np.running_mean = mean;
    np.running_var = capture.sum_sq[site] / n - mean.cwiseProduct(mean);
    ++site;
  };
  for (MixLayerParams& layer : out.layers) {
    apply(layer.norm1);
    apply(layer.norm2);
  }
  apply(out.out_norm);
  return out;
}

// ---------------------------------------------------------------------------

HeadParams init_head(HeadKind kind, int in_dim, int out_dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, fnv1a("init_head")));
  HeadParams h;
  h.kind = kind;
  switch (kind) {
    case HeadKind::linear_bn:
      h.bn = init_norm(in_dim, true);
      h.w1 = init_affine(rng, out_dim, in_dim);
      h.b1 = VecX::Zero(out_dim);
      break;
    case HeadKind::mlp2:
      h.w1 = init_affine(rng, in_dim, in_dim);
      h.b1 = VecX::Zero(in_dim);
      h.w2 = init_affine(rng, out_dim, in_dim);
      h.b2 = VecX::Zero(out_dim);
      break;
    case HeadKind::distill_proj:
      h.w1 = init_affine(rng, out_dim, in_dim);
      h.b1 = VecX::Zero(out_dim);
      break;
  }
  return h;
}

HeadParams zeros_like(const HeadParams& head) {
  HeadParams z = head;
  visit_head_tensors(z, [](int, const std::string&, Real* data, Eigen::Index size) {
    Eigen::Map<VecX>(data, size).setZero();
  });
  if (z.kind == HeadKind::linear_bn) {
    z.bn.running_mean.setZero();
    z.bn.running_var.setZero();
  }
  return z;
}

std::uint64_t parameter_hash(const HeadParams& head) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  visit_head_tensors(head, [&](int, const std::string& name, const Real* data, Eigen::Index size) {
    h = fnv1a(name, h);
    h = fnv1a(data, static_cast<std::size_t>(size) * sizeof(Real), h);
  });
  if (head.kind == HeadKind::linear_bn) {
    h = fnv1a(head.bn.running_mean.data(), static_cast<std::size_t>(head.bn.running_mean.size()) * sizeof(Real), h);
    h = fnv1a(head.bn.running_var.data(), static_cast<std::size_t>(head.bn.running_var.size()) * sizeof(Real), h);
  }
  return h;
}

MatX head_forward(const HeadParams& head, const MatX& feats, Mode mode, HeadCache* cache) {
  require(feats.cols() == head.w1.cols() || head.kind == HeadKind::linear_bn,
          "head_forward: feature dim mismatch");
  if (cache) cache->input = feats;
  switch (head.kind) {
    case HeadKind::linear_bn: {
      require(feats.cols() == head.bn.gamma.size(), "head_forward: feature dim mismatch");
      MatX bn_out = mode == Mode::train
                        ? batch_norm_forward_train(feats, head.bn.gamma, head.bn.beta,
                                                   cache ? &cache->bn : nullptr)
                        : batch_norm_forward_eval(feats, head.bn.gamma, head.bn.beta,
                                                  head.bn.running_mean, head.bn.running_var);
      if (cache) cache->bn_out = bn_out;
      return (bn_out * head.w1.transpose()).rowwise() + head.b1.transpose();
    }
    case HeadKind::mlp2: {
      MatX hidden_pre = (feats * head.w1.transpose()).rowwise() + head.b1.transpose();
      if (cache) cache->hidden_pre = hidden_pre;
      const MatX hidden = hidden_pre.cwiseMax(0.0);
      return (hidden * head.w2.transpose()).rowwise() + head.b2.transpose();
    }
    case HeadKind::distill_proj:
      return (feats * head.w1.transpose()).rowwise() + head.b1.transpose();
  }
  throw std::logic_error("unreachable");
}

void head_backward(const HeadParams& head, const HeadCache& cache, const MatX& grad_out,
                   HeadParams& grads, MatX* grad_feats) {
  switch (head.kind) {
    case HeadKind::linear_bn: {
      grads.w1 += grad_out.transpose() * cache.bn_out;
      grads.b1 += grad_out.colwise().sum().transpose();
      const MatX d_bn_out = grad_out * head.w1;
      require(cache.bn.xhat.size() > 0, "head_backward: linear_bn needs a train-mode cache");
      MatX dx;
      batch_norm_backward(d_bn_out, head.bn.gamma, cache.bn, dx, grads.bn.gamma, grads.bn.beta);
      if (grad_feats) *grad_feats = dx;
      return;
    }
    case HeadKind::mlp2: {
      const MatX hidden = cache.hidden_pre.cwiseMax(0.0);
      grads.w2 += grad_out.transpose() * hidden;
      grads.b2 += grad_out.colwise().sum().transpose();
      MatX dhidden = grad_out * head.w2;
      dhidden = (cache.hidden_pre.array() > 0.0).select(dhidden, 0.0);
      grads.w1 += dhidden.transpose() * cache.input;
      grads.b1 += dhidden.colwise().sum().transpose();
      if (grad_feats) *grad_feats = dhidden * head.w1;
      return;
    }
    case HeadKind::distill_proj: {
      grads.w1 += grad_out.transpose() * cache.input;
      grads.b1 += grad_out.colwise().sum().transpose();
      if (grad_feats) *grad_feats = grad_out * head.w1;
      return;
    }
  }
}

void commit_head_batch_stats(HeadParams& head, const HeadCache& cache, Real momentum) {
  if (head.kind != HeadKind::linear_bn) return;
  require(cache.bn.batch_mean.size() > 0, "commit_head_batch_stats: no train-mode cache");
  head.bn.running_mean = momentum * head.bn.running_mean + (1.0 - momentum) * cache.bn.batch_mean;
  head.bn.running_var = momentum * head.bn.running_var + (1.0 - momentum) * cache.bn.batch_var;
}

AffineLayer fold_linear_head(const HeadParams& head) {
  require(head.kind == HeadKind::linear_bn, "fold_linear_head: head is not linear_bn");
  require(head.bn.running_mean.size() > 0, "fold_linear_head: statistics not populated");
  const VecX invstd = (head.bn.running_var.array() + kNormEps).rsqrt();
  const VecX scale = head.bn.gamma.cwiseProduct(invstd);
  AffineLayer out;
  out.w = head.w1 * scale.asDiagonal();
  out.b = head.b1 + head.w1 * (head.bn.beta - head.bn.running_mean.cwiseProduct(scale));
  return out;
}

}  // namespace lidarseg
