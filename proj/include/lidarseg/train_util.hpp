#pragma once

#include "lidarseg/backbone.hpp"
#include "lidarseg/optim.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace lidarseg {

// Line-delimited JSON training log (one record per epoch/event).
struct TrainLog {
  std::vector<nlohmann::json> records;

  void add(nlohmann::json record) { records.push_back(std::move(record)); }

  void write_jsonl(const std::string& path) const {
    std::ofstream f(path);
    require(f.good(), "cannot write log " + path);
    for (const auto& r : records) f << r.dump() << "\n";
  }

  static TrainLog read_jsonl(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "cannot read log " + path);
    TrainLog log;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty()) log.records.push_back(nlohmann::json::parse(line));
    }
    return log;
  }

  // values of a numeric key across records that carry it (and match the
  // split when given)
  std::vector<double> series(const std::string& key, const std::string& split = "") const {
    std::vector<double> out;
    for (const auto& r : records) {
      if (!r.contains(key)) continue;
      if (!split.empty() && r.value("split", "") != split) continue;
      out.push_back(r.at(key).get<double>());
    }
    return out;
  }
};

// One optimizable tensor with its gradient and group id. The head (when
// present) takes the group right above the backbone's.
struct ParamSlot {
  int group = 0;
  std::string name;
  Real* weights = nullptr;
  const Real* grads = nullptr;
  Eigen::Index size = 0;
  bool frozen = false;
  bool pretrained = false;  // carries layerwise-decay / weight-decay exemptions
};

inline std::vector<ParamSlot> collect_slots(BackboneParams& params, const BackboneParams& grads,
                                            bool backbone_pretrained, HeadParams* head,
                                            const HeadParams* head_grads) {
  std::vector<ParamSlot> slots;
  std::vector<const Real*> grad_ptrs;
  visit_tensors(grads, [&](int, const std::string&, const Real* data, Eigen::Index) {
    grad_ptrs.push_back(data);
  });
  std::size_t i = 0;
  visit_tensors(params, [&](int group, const std::string& name, Real* data, Eigen::Index size) {
    ParamSlot s;
    s.group = group;
    s.name = name;
    s.weights = data;
    s.grads = grad_ptrs[i++];
    s.size = size;
    s.frozen = params.frozen[static_cast<std::size_t>(group)] != 0;
    s.pretrained = backbone_pretrained;
    slots.push_back(s);
  });
  if (head) {
    const int head_group = params.num_groups();
    std::vector<const Real*> hg;
    visit_head_tensors(*head_grads, [&](int, const std::string&, const Real* data, Eigen::Index) {
      hg.push_back(data);
    });
    std::size_t j = 0;
    visit_head_tensors(*head, [&](int, const std::string& name, Real* data, Eigen::Index size) {
      ParamSlot s;
      s.group = head_group;
      s.name = name;
      s.weights = data;
      s.grads = hg[j++];
      s.size = size;
      s.frozen = head->frozen;
      s.pretrained = false;
      slots.push_back(s);
    });
  }
  return slots;
}

// lr/wd per slot come from the policy; frozen slots are skipped entirely
// (no optimizer state drift).
inline void adamw_step(AdamW& opt, std::vector<ParamSlot>& slots,
                       const std::function<std::pair<Real, Real>(const ParamSlot&)>& policy) {
  opt.begin_step();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    ParamSlot& s = slots[i];
    if (s.frozen) continue;
    const auto [lr, wd] = policy(s);
    opt.update(i, Eigen::Map<VecX>(s.weights, s.size),
               Eigen::Map<const VecX>(s.grads, s.size), lr, wd);
  }
}

// deterministic choice of at most max_points points (0 keeps everything)
inline PointCloud subsample_cloud(const PointCloud& cloud, int max_points, Rng& rng) {
  if (max_points <= 0 || cloud.size() <= max_points) return cloud;
  const auto keep = rng.sample_indices(static_cast<int>(cloud.size()), max_points);
  PointCloud out;
  out.xyz.resize(max_points, 3);
  if (cloud.intensity) out.intensity = VecX(max_points);
  if (cloud.labels) out.labels = VecXi(max_points);
  for (int i = 0; i < max_points; ++i) {
    out.xyz.row(i) = cloud.xyz.row(keep[static_cast<std::size_t>(i)]);
    if (cloud.intensity) (*out.intensity)[i] = (*cloud.intensity)[keep[static_cast<std::size_t>(i)]];
    if (cloud.labels) (*out.labels)[i] = (*cloud.labels)[keep[static_cast<std::size_t>(i)]];
  }
  return out;
}

}  // namespace lidarseg
