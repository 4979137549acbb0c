#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "coglab/serde.hpp"

// Checkpoint container, version 1.
//
//   bytes 0..3   magic "CGLB"
//   bytes 4..7   u32 little-endian format version
//   bytes 8..15  u64 little-endian header length H
//   bytes 16..   UTF-8 JSON header of H bytes:
//                  {format_version, config{..}, seed, step,
//                   lora{attached, rank, scaling, layers[]},
//                   tensors[{name, rows, cols, offset}],
//                   optimizer?{hp{..}, step, tensors[{name, rows, cols, offset}]}}
//   then         raw float32 tensor payload, row-major, at the declared
//                offsets (relative to the payload start)
//
// Offsets are in float elements, not bytes.

namespace coglab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace detail {

constexpr char kMagic[4] = {'C', 'G', 'L', 'B'};
constexpr std::uint32_t kFormatVersion = 1;

struct TensorEntry {
  std::string name;
  long rows = 0, cols = 0;
  std::size_t offset = 0;  // in float elements
};

inline void to_json(Json& j, const TensorEntry& t) {
  j = Json{{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}};
}
inline void from_json(const Json& j, TensorEntry& t) {
  j.at("name").get_to(t.name);
  j.at("rows").get_to(t.rows);
  j.at("cols").get_to(t.cols);
  j.at("offset").get_to(t.offset);
}

}  // namespace detail

struct LoadedCheckpoint {
  ModelState<float> model;
  long step = 0;
  std::optional<OptimizerState<float>> optimizer;
};

inline void save_checkpoint(const ModelState<float>& m, const std::string& path, long step,
                            const OptimizerState<float>* opt = nullptr) {
  std::vector<detail::TensorEntry> entries;
  std::vector<float> payload;
  auto append = [&](const std::string& name, const Mat<float>& t) {
    detail::TensorEntry e{name, t.rows(), t.cols(), payload.size()};
    payload.insert(payload.end(), t.data(), t.data() + t.size());
    entries.push_back(std::move(e));
  };
  for_each_param(m.p, m.config, [&](const std::string& name, const Mat<float>& t) {
    append(name, t);
  });

  Json header;
  header["format_version"] = detail::kFormatVersion;
  header["config"] = m.config;
  header["seed"] = m.seed;
  header["step"] = step;
  Json lora_j;
  lora_j["attached"] = m.has_adapters;
  if (m.has_adapters) {
    lora_j["rank"] = m.lora.rank;
    lora_j["scaling"] = m.lora.scaling;
    std::vector<int> layers;
    for (int l = 0; l < m.config.n_layers; ++l)
      if (m.p.adapters[static_cast<std::size_t>(l)].present) layers.push_back(l);
    lora_j["layers"] = layers;
  }
  header["lora"] = lora_j;

  if (opt != nullptr) {
    std::vector<detail::TensorEntry> opt_entries;
    for (const auto& kv : opt->m) append("m." + kv.first, kv.second),
        opt_entries.push_back(entries.back());
    for (const auto& kv : opt->v) append("v." + kv.first, kv.second),
        opt_entries.push_back(entries.back());
    // the optimizer tensors were also pushed to `entries`; keep them only
    // under the optimizer section
    entries.resize(entries.size() - opt_entries.size());
    Json oj;
    oj["hp"] = opt->hp;
    oj["step"] = opt->step;
    oj["tensors"] = opt_entries;
    header["optimizer"] = oj;
  }
  header["tensors"] = entries;

  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out.write(detail::kMagic, 4);
  const std::uint32_t ver = detail::kFormatVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw FormatError("short write while saving checkpoint: " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  in.seekg(0, std::ios::end);
  const std::size_t file_size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);

  auto need = [&](std::size_t upto, const char* what) {
    if (file_size < upto)
      throw FormatError("checkpoint truncated at byte " + std::to_string(file_size) +
                        " while reading " + what + " (need " + std::to_string(upto) + ")");
  };

  char magic[4];
  need(4, "magic");
  in.read(magic, 4);
  if (std::memcmp(magic, detail::kMagic, 4) != 0)
    throw FormatError("bad magic at byte 0: not a checkpoint file");
  std::uint32_t ver = 0;
  need(8, "version");
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != detail::kFormatVersion)
    throw FormatError("unsupported format version " + std::to_string(ver) + " at byte 4");
  std::uint64_t hlen = 0;
  need(16, "header length");
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  need(16 + hlen, "header json");
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));

  Json header;
  try {
    header = Json::parse(hs);
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid header json at byte 16: ") + e.what());
  }

  const std::size_t payload_base = 16 + static_cast<std::size_t>(hlen);
  const std::size_t payload_floats = (file_size - payload_base) / sizeof(float);
  std::vector<float> payload(payload_floats);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload_floats * sizeof(float)));

  LoadedCheckpoint lc;
  ModelConfig cfg = header.at("config").get<ModelConfig>();
  cfg.validate();
  lc.model = init_model<float>(cfg, header.at("seed").get<std::uint64_t>());
  lc.step = header.at("step").get<long>();

  const Json& lj = header.at("lora");
  if (lj.at("attached").get<bool>()) {
    TrainPlan plan;
    plan.trainable_layers = lj.at("layers").get<std::vector<int>>();
    LoRAConfig lcfg;
    lcfg.rank = lj.at("rank").get<int>();
    lcfg.scaling = lj.at("scaling").get<double>();
    attach_lora(lc.model, lcfg, plan);
  }

  auto read_tensor = [&](const detail::TensorEntry& e, Mat<float>& dst, const char* section) {
    if (dst.rows() != e.rows || dst.cols() != e.cols)
      throw FormatError("tensor " + e.name + " in " + section + " declares shape " +
                        std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                        " but config implies " + std::to_string(dst.rows()) + "x" +
                        std::to_string(dst.cols()));
    const std::size_t count = static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols);
    if (e.offset + count > payload_floats)
      throw FormatError("checkpoint truncated: tensor " + e.name + " ends at payload offset " +
                        std::to_string((e.offset + count) * sizeof(float) + payload_base) +
                        " beyond file size " + std::to_string(file_size));
    std::memcpy(dst.data(), payload.data() + e.offset, count * sizeof(float));
  };

  std::map<std::string, Mat<float>*> by_name;
  for_each_param(lc.model.p, cfg, [&](const std::string& name, Mat<float>& t) {
    by_name[name] = &t;
  });
  auto entries = header.at("tensors").get<std::vector<detail::TensorEntry>>();
  std::size_t seen = 0;
  for (const auto& e : entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw FormatError("unknown tensor name in header: " + e.name);
    read_tensor(e, *it->second, "model");
    ++seen;
  }
  if (seen != by_name.size())
    throw FormatError("checkpoint lists " + std::to_string(seen) + " tensors but config implies " +
                      std::to_string(by_name.size()));

  if (header.contains("optimizer")) {
    const Json& oj = header.at("optimizer");
    OptimizerState<float> opt;
    opt.hp = oj.at("hp").get<AdamWConfig>();
    opt.step = oj.at("step").get<long>();
    for (const auto& ej : oj.at("tensors")) {
      auto e = ej.get<detail::TensorEntry>();
      const bool is_m = e.name.rfind("m.", 0) == 0;
      const bool is_v = e.name.rfind("v.", 0) == 0;
      if (!is_m && !is_v) throw FormatError("bad optimizer tensor name: " + e.name);
      const std::string pname = e.name.substr(2);
      auto it = by_name.find(pname);
      if (it == by_name.end())
        throw FormatError("optimizer tensor for unknown parameter: " + pname);
      Mat<float>& slot = is_m ? opt.m[pname] : opt.v[pname];
      slot.resize(it->second->rows(), it->second->cols());
      read_tensor(e, slot, "optimizer");
    }
    lc.optimizer = std::move(opt);
  }
  return lc;
}

}  // namespace coglab
