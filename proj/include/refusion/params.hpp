#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "refusion/autodiff.hpp"
#include "refusion/tensor.hpp"

namespace refusion::nets {

enum class Role { F, R, P };
enum class Ablation { full, concat_afm, no_interaction, no_gating, decision_level };

std::string role_str(Role r);
Role role_from(const std::string& s);
std::string ablation_str(Ablation a);
Ablation ablation_from(const std::string& s);

struct NetConfig {
  int base_channels = 16;
  int num_blocks = 2;
  int attention_heads = 2;
  Ablation ablation = Ablation::full;

  bool operator==(const NetConfig&) const = default;
};

struct ParamEntry {
  std::string name;
  Tensor tensor;
};

// Named, ordered parameter set for one network. Order is part of the format:
// save/load round-trips bit-exactly and preserves it.
class ParameterCollection {
 public:
  ParameterCollection() = default;
  ParameterCollection(Role role, NetConfig cfg, uint64_t seed)
      : role_(role), cfg_(cfg), seed_(seed) {}

  Role role() const { return role_; }
  const NetConfig& net_config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

  void add(std::string name, Tensor t);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }
  int64_t total_values() const;

  ParameterCollection deep_copy() const;

  void save(const std::filesystem::path& path) const;
  static ParameterCollection load(const std::filesystem::path& path);

 private:
  Role role_ = Role::F;
  NetConfig cfg_;
  uint64_t seed_ = 0;
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// The same parameter set lifted into graph Values, so interim parameters
// (theta' = theta - eta*g) coexist with the originals without mutation.
class ParamValues {
 public:
  ParamValues() = default;

  static ParamValues leaves(const ParameterCollection& pc);
  static ParamValues constants(const ParameterCollection& pc);

  Role role() const { return role_; }
  const NetConfig& net_config() const { return cfg_; }

  const ad::Value& at(const std::string& name) const;
  const std::vector<std::pair<std::string, ad::Value>>& items() const { return items_; }
  std::vector<ad::Value> values() const;

  // Same names/role/config, new values (used for theta').
  ParamValues with_values(const std::vector<ad::Value>& vals) const;
  ParameterCollection snapshot(uint64_t seed) const;

  void require_role(Role r, const char* who) const;

 private:
  Role role_ = Role::F;
  NetConfig cfg_;
  std::vector<std::pair<std::string, ad::Value>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Generic checkpoint container: one JSON header plus named tensors. Training
// states and single-network checkpoints share it. Byte-exact round trip.
struct Archive {
  std::string header_json;
  std::vector<ParamEntry> tensors;
};

void save_archive(const std::filesystem::path& path, const Archive& a);
Archive load_archive(const std::filesystem::path& path);

inline constexpr const char* kFrameworkVersion = "refusion 0.1.0";

}  // namespace refusion::nets
