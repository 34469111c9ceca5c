#include "lidarseg/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <map>

namespace lidarseg {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'E', 'G', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const std::uint8_t* p) {
  return static_cast<std::uint64_t>(get_u32(p)) | (static_cast<std::uint64_t>(get_u32(p + 4)) << 32);
}

void append_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Real* data,
                   Eigen::Index size) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u64(out, static_cast<std::uint64_t>(size));
  for (Eigen::Index i = 0; i < size; ++i) {
    const float f = static_cast<float>(data[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

nlohmann::json arch_to_json(const ArchConfig& cfg) {
  return {{"width", cfg.width},
          {"depth", cfg.depth},
          {"norm", cfg.norm == NormKind::batch ? "batch" : "layer"},
          {"use_intensity", cfg.use_intensity},
          {"grid_res", cfg.grid_res},
          {"feature_dim_out", cfg.feature_dim_out}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig cfg;
  cfg.width = j.at("width").get<int>();
  cfg.depth = j.at("depth").get<int>();
  cfg.norm = j.at("norm").get<std::string>() == "batch" ? NormKind::batch : NormKind::layer;
  cfg.use_intensity = j.at("use_intensity").get<bool>();
  cfg.grid_res = j.at("grid_res").get<double>();
  cfg.feature_dim_out = j.at("feature_dim_out").get<int>();
  return cfg;
}

std::string head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::linear_bn: return "linear_bn";
    case HeadKind::mlp2: return "mlp2";
    case HeadKind::distill_proj: return "distill_proj";
  }
  return "?";
}

HeadKind head_kind_from_name(const std::string& name) {
  if (name == "linear_bn") return HeadKind::linear_bn;
  if (name == "mlp2") return HeadKind::mlp2;
  if (name == "distill_proj") return HeadKind::distill_proj;
  throw std::runtime_error("unknown head kind: " + name);
}

}  // namespace

void save_checkpoint(const std::string& path, const BackboneParams& backbone,
                     const HeadParams* head) {
  nlohmann::json meta;
  meta["arch"] = arch_to_json(backbone.cfg);
  meta["frozen"] = backbone.frozen;
  if (head) {
    meta["head"] = {{"kind", head_kind_name(head->kind)},
                    {"in_dim", head->w1.cols()},
                    {"out_dim", head->out_dim()},
                    {"frozen", head->frozen}};
  }
  const std::string meta_str = meta.dump();

  std::uint32_t tensor_count = 0;
  const auto count_fn = [&](int, const std::string&, const Real*, Eigen::Index) { ++tensor_count; };
  visit_tensors(backbone, count_fn);
  visit_buffers(backbone, [&](const std::string&, const Real*, Eigen::Index) { ++tensor_count; });
  if (head) {
    visit_head_tensors(*head, count_fn);
    if (head->kind == HeadKind::linear_bn) tensor_count += 2;
  }

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out.insert(out.end(), meta_str.begin(), meta_str.end());
  put_u32(out, tensor_count);

  visit_tensors(backbone, [&](int, const std::string& name, const Real* data, Eigen::Index size) {
    append_tensor(out, name, data, size);
  });
  visit_buffers(backbone, [&](const std::string& name, const Real* data, Eigen::Index size) {
    append_tensor(out, name, data, size);
  });
  if (head) {
    visit_head_tensors(*head, [&](int, const std::string& name, const Real* data, Eigen::Index size) {
      append_tensor(out, name, data, size);
    });
    if (head->kind == HeadKind::linear_bn) {
      append_tensor(out, "head.bn.running_mean", head->bn.running_mean.data(),
                    head->bn.running_mean.size());
      append_tensor(out, "head.bn.running_var", head->bn.running_var.data(),
                    head->bn.running_var.size());
    }
  }

  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  require(f.good(), "checkpoint write failed " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(bytes.size() > 16 && std::memcmp(bytes.data(), kMagic, 8) == 0,
          "not a checkpoint: " + path);
  std::size_t pos = 8;
  const std::uint32_t version = get_u32(bytes.data() + pos);
  pos += 4;
  require(version == kVersion, "unsupported checkpoint version");
  const std::uint32_t meta_len = get_u32(bytes.data() + pos);
  pos += 4;
  require(pos + meta_len <= bytes.size(), "truncated checkpoint meta");
  const nlohmann::json meta =
      nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                            bytes.begin() + static_cast<std::ptrdiff_t>(pos + meta_len));
  pos += meta_len;

  // read all tensors into a name -> values table
  require(pos + 4 <= bytes.size(), "truncated checkpoint");
  const std::uint32_t tensor_count = get_u32(bytes.data() + pos);
  pos += 4;
  std::map<std::string, std::vector<Real>> tensors;
  for (std::uint32_t t = 0; t < tensor_count; ++t) {
    require(pos + 4 <= bytes.size(), "truncated checkpoint");
    const std::uint32_t name_len = get_u32(bytes.data() + pos);
    pos += 4;
    require(pos + name_len + 8 <= bytes.size(), "truncated checkpoint");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const std::uint64_t n = get_u64(bytes.data() + pos);
    pos += 8;
    require(pos + n * 4 <= bytes.size(), "truncated checkpoint tensor " + name);
    std::vector<Real> values(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::uint32_t bits = get_u32(bytes.data() + pos + i * 4);
      float v;
      std::memcpy(&v, &bits, 4);
      values[i] = static_cast<Real>(v);
    }
    pos += n * 4;
    tensors.emplace(std::move(name), std::move(values));
  }

  auto fill = [&](const std::string& name, Real* data, Eigen::Index size) {
    const auto it = tensors.find(name);
    require(it != tensors.end(), "checkpoint missing tensor " + name);
    require(static_cast<Eigen::Index>(it->second.size()) == size,
            "checkpoint tensor size mismatch for " + name);
    std::copy(it->second.begin(), it->second.end(), data);
  };

  Checkpoint ckpt;
  ckpt.backbone = init_params(arch_from_json(meta.at("arch")), 0);
  ckpt.backbone.frozen = meta.at("frozen").get<std::vector<std::uint8_t>>();
  visit_tensors(ckpt.backbone, [&](int, const std::string& name, Real* data, Eigen::Index size) {
    fill(name, data, size);
  });
  visit_buffers(ckpt.backbone,
                [&](const std::string& name, Real* data, Eigen::Index size) { fill(name, data, size); });

  if (meta.contains("head")) {
    const auto& hj = meta.at("head");
    HeadParams head = init_head(head_kind_from_name(hj.at("kind").get<std::string>()),
                                hj.at("in_dim").get<int>(), hj.at("out_dim").get<int>(), 0);
    head.frozen = hj.at("frozen").get<bool>();
    visit_head_tensors(head, [&](int, const std::string& name, Real* data, Eigen::Index size) {
      fill(name, data, size);
    });
    if (head.kind == HeadKind::linear_bn) {
      fill("head.bn.running_mean", head.bn.running_mean.data(), head.bn.running_mean.size());
      fill("head.bn.running_var", head.bn.running_var.data(), head.bn.running_var.size());
    }
    ckpt.head = std::move(head);
  }
  return ckpt;
}

}  // namespace lidarseg
