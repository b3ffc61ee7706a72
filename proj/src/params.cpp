#include "refusion/params.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace refusion::nets {

using nlohmann::json;

std::string role_str(Role r) {
  switch (r) {
    case Role::F: return "F";
    case Role::R: return "R";
    case Role::P: return "P";
  }
  return "?";
}

Role role_from(const std::string& s) {
  if (s == "F") return Role::F;
  if (s == "R") return Role::R;
  if (s == "P") return Role::P;
  throw ConfigError("unknown role '" + s + "'");
}

std::string ablation_str(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::concat_afm: return "concat_afm";
    case Ablation::no_interaction: return "no_interaction";
    case Ablation::no_gating: return "no_gating";
    case Ablation::decision_level: return "decision_level";
  }
  return "?";
}

Ablation ablation_from(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "concat_afm") return Ablation::concat_afm;
  if (s == "no_interaction") return Ablation::no_interaction;
  if (s == "no_gating") return Ablation::no_gating;
  if (s == "decision_level") return Ablation::decision_level;
  throw ConfigError("unknown ablation '" + s + "'");
}

void ParameterCollection::add(std::string name, Tensor t) {
  if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), std::move(t)});
}

const Tensor& ParameterCollection::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("missing parameter " + name);
  return entries_[it->second].tensor;
}

Tensor& ParameterCollection::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("missing parameter " + name);
  return entries_[it->second].tensor;
}

int64_t ParameterCollection::total_values() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

ParameterCollection ParameterCollection::deep_copy() const {
  ParameterCollection out(role_, cfg_, seed_);
  for (const auto& e : entries_) out.add(e.name, e.tensor.clone());
  return out;
}

namespace {

json net_config_json(const NetConfig& c) {
  return json{{"base_channels", c.base_channels},
              {"num_blocks", c.num_blocks},
              {"attention_heads", c.attention_heads},
              {"ablation", ablation_str(c.ablation)}};
}

NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.num_blocks = j.at("num_blocks").get<int>();
  c.attention_heads = j.at("attention_heads").get<int>();
  c.ablation = ablation_from(j.at("ablation").get<std::string>());
  return c;
}

}  // namespace

void ParameterCollection::save(const std::filesystem::path& path) const {
  json header{{"kind", "parameter_collection"},
              {"role", role_str(role_)},
              {"net", net_config_json(cfg_)},
              {"seed", seed_},
              {"framework_version", kFrameworkVersion}};
  Archive a;
  a.header_json = header.dump();
  a.tensors = entries_;
  save_archive(path, a);
}

ParameterCollection ParameterCollection::load(const std::filesystem::path& path) {
  Archive a = load_archive(path);
  json header = json::parse(a.header_json);
  if (header.value("kind", "") != "parameter_collection")
    throw IoError("not a parameter-collection checkpoint: " + path.string());
  ParameterCollection pc(role_from(header.at("role").get<std::string>()),
                         net_config_from_json(header.at("net")),
                         header.at("seed").get<uint64_t>());
  for (auto& e : a.tensors) pc.add(e.name, std::move(e.tensor));
  return pc;
}

ParamValues ParamValues::leaves(const ParameterCollection& pc) {
  ParamValues pv;
  pv.role_ = pc.role();
  pv.cfg_ = pc.net_config();
  for (const auto& e : pc.entries()) {
    pv.index_[e.name] = pv.items_.size();
    pv.items_.emplace_back(e.name, ad::Value::leaf(e.tensor.clone()));
  }
  return pv;
}

ParamValues ParamValues::constants(const ParameterCollection& pc) {
  ParamValues pv;
  pv.role_ = pc.role();
  pv.cfg_ = pc.net_config();
  for (const auto& e : pc.entries()) {
    pv.index_[e.name] = pv.items_.size();
    pv.items_.emplace_back(e.name, ad::Value::constant(e.tensor));
  }
  return pv;
}

const ad::Value& ParamValues::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("missing parameter " + name);
  return items_[it->second].second;
}

std::vector<ad::Value> ParamValues::values() const {
  std::vector<ad::Value> out;
  out.reserve(items_.size());
  for (const auto& [_, v] : items_) out.push_back(v);
  return out;
}

ParamValues ParamValues::with_values(const std::vector<ad::Value>& vals) const {
  if (vals.size() != items_.size()) throw ContractError("with_values: size mismatch");
  ParamValues pv;
  pv.role_ = role_;
  pv.cfg_ = cfg_;
  pv.index_ = index_;
  pv.items_.reserve(items_.size());
  for (size_t i = 0; i < items_.size(); ++i) {
    if (!vals[i].defined() || vals[i].shape() != items_[i].second.shape())
      throw ContractError("with_values: shape mismatch at " + items_[i].first);
    pv.items_.emplace_back(items_[i].first, vals[i]);
  }
  return pv;
}

ParameterCollection ParamValues::snapshot(uint64_t seed) const {
  ParameterCollection pc(role_, cfg_, seed);
  for (const auto& [name, v] : items_) pc.add(name, v.val().clone());
  return pc;
}

void ParamValues::require_role(Role r, const char* who) const {
  if (role_ != r)
    throw RoleError(std::string(who) + ": expected role " + role_str(r) + ", got " +
                    role_str(role_));
}

namespace {

template <class T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated checkpoint");
  return v;
}

constexpr char kMagic[4] = {'R', 'F', 'C', 'K'};

}  // namespace

void save_archive(const std::filesystem::path& path, const Archive& a) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  write_raw<uint32_t>(os, 1u);
  write_raw<uint64_t>(os, a.header_json.size());
  os.write(a.header_json.data(), static_cast<std::streamsize>(a.header_json.size()));
  write_raw<uint32_t>(os, static_cast<uint32_t>(a.tensors.size()));
  for (const auto& e : a.tensors) {
    write_raw<uint32_t>(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_raw<uint32_t>(os, static_cast<uint32_t>(e.tensor.ndim()));
    for (int64_t d : e.tensor.shape()) write_raw<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.tensor.data()),
             static_cast<std::streamsize>(e.tensor.numel() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad checkpoint magic: " + path.string());
  const uint32_t version = read_raw<uint32_t>(is);
  if (version != 1) throw IoError("unsupported checkpoint version");
  const uint64_t hlen = read_raw<uint64_t>(is);
  Archive a;
  a.header_json.resize(hlen);
  is.read(a.header_json.data(), static_cast<std::streamsize>(hlen));
  const uint32_t n = read_raw<uint32_t>(is);
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t nlen = read_raw<uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const uint32_t ndim = read_raw<uint32_t>(is);
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) d = read_raw<int64_t>(is);
    std::vector<double> vals(static_cast<size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint tensor " + name);
    a.tensors.push_back({std::move(name), Tensor::from(shape, std::move(vals))});
  }
  return a;
}

}  // namespace refusion::nets
