#include "bf/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bf/errors.hpp"

namespace bf {

namespace {

constexpr const char* kMagic = "BRANCHFORMER-CHECKPOINT";

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

std::map<std::string, std::string> parse_header(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMagic)
    throw CheckpointError(CheckpointError::Kind::BadHeader, "not a checkpoint file (bad magic)");
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line == "end_header") return kv;
    auto pos = line.find('=');
    if (pos == std::string::npos)
      throw CheckpointError(CheckpointError::Kind::BadHeader, "malformed header line: " + line);
    kv[line.substr(0, pos)] = line.substr(pos + 1);
  }
  throw CheckpointError(CheckpointError::Kind::Truncated, "header ended before end_header");
}

const std::string& header_get(const std::map<std::string, std::string>& kv,
                              const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw CheckpointError(CheckpointError::Kind::BadHeader, "header missing key: " + key);
  return it->second;
}

}  // namespace

void save_checkpoint(const std::string& path, const EncoderConfig& config, EncoderParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw CheckpointError(CheckpointError::Kind::IoFailure, "cannot open for writing: " + path);
  os << kMagic << '\n';
  os << "format_version=" << kCheckpointFormatVersion << '\n';
  os << "pruned=" << (params.pruned ? 1 : 0) << '\n';
  os << "num_blocks=" << config.num_blocks << '\n';
  os << "feature_dim=" << config.feature_dim << '\n';
  os << "d=" << config.d << '\n';
  os << "d_hidden=" << config.d_hidden << '\n';
  os << "heads=" << config.heads << '\n';
  os << "kernel=" << config.kernel << '\n';
  os << "attention=" << to_string(config.attention) << '\n';
  os << "merge=" << to_string(config.merge) << '\n';
  os << "dropout=" << fmt_double(config.dropout) << '\n';
  os << "branch_dropout=" << fmt_double(config.branch_dropout) << '\n';
  os << "seed=" << config.seed << '\n';
  os << "end_header\n";
  params.visit([&os](const std::string& name, Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) put_f64(os, t.data()[i]);
  });
  if (!os) throw CheckpointError(CheckpointError::Kind::IoFailure, "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::IoFailure, "cannot open: " + path);
  auto kv = parse_header(is);

  if (header_get(kv, "format_version") != std::to_string(kCheckpointFormatVersion))
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "unsupported checkpoint format version " +
                              header_get(kv, "format_version"));

  Checkpoint ck;
  ck.config.num_blocks = std::stoi(header_get(kv, "num_blocks"));
  ck.config.feature_dim = std::stoi(header_get(kv, "feature_dim"));
  ck.config.d = std::stoi(header_get(kv, "d"));
  ck.config.d_hidden = std::stoi(header_get(kv, "d_hidden"));
  ck.config.heads = std::stoi(header_get(kv, "heads"));
  ck.config.kernel = std::stoi(header_get(kv, "kernel"));
  ck.config.attention = attention_kind_from_string(header_get(kv, "attention"));
  ck.config.merge = merge_kind_from_string(header_get(kv, "merge"));
  ck.config.dropout = std::stod(header_get(kv, "dropout"));
  ck.config.branch_dropout = std::stod(header_get(kv, "branch_dropout"));
  ck.config.seed = std::stoull(header_get(kv, "seed"));
  const bool pruned = header_get(kv, "pruned") == "1";

  // Shapes come from the config; the file supplies the values.
  ck.params = init_encoder(ck.config);
  if (pruned) ck.params = prune_to_cgmlp(ck.config, ck.params);

  std::map<std::string, std::vector<double>> arrays;
  while (true) {
    std::uint32_t name_len = 0;
    if (!get_u32(is, name_len)) {
      if (is.eof() && is.gcount() == 0) break;  // clean end of records
      throw CheckpointError(CheckpointError::Kind::Truncated, "truncated record header");
    }
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw CheckpointError(CheckpointError::Kind::Truncated, "truncated parameter name");
    std::uint64_t count = 0;
    if (!get_u64(is, count))
      throw CheckpointError(CheckpointError::Kind::Truncated, "truncated length for " + name);
    std::vector<double> vals(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      if (!get_u64(is, bits))
        throw CheckpointError(CheckpointError::Kind::Truncated, "truncated data for " + name);
      vals[i] = std::bit_cast<double>(bits);
    }
    arrays[name] = std::move(vals);
  }

  std::set<std::string> consumed;
  ck.params.visit([&](const std::string& name, Tensor& t) {
    auto it = arrays.find(name);
    if (it == arrays.end())
      throw CheckpointError(CheckpointError::Kind::Truncated, "missing parameter: " + name);
    if (it->second.size() != t.numel())
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                            "parameter " + name + " has " + std::to_string(it->second.size()) +
                                " values, config expects " + std::to_string(t.numel()));
    t.data_vec() = it->second;
    consumed.insert(name);
  });
  for (const auto& [name, vals] : arrays)
    if (!consumed.count(name))
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                            "unexpected parameter in file: " + name);
  return ck;
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "num_blocks", "feature_dim", "d",       "d_hidden",       "heads", "kernel",
      "attention",  "merge",       "dropout", "branch_dropout", "seed"};
  if (!j.is_object()) throw ConfigError("encoder config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown encoder config key: " + key);

  EncoderConfig cfg;
  cfg.num_blocks = j.at("num_blocks").get<int>();
  cfg.feature_dim = j.at("feature_dim").get<int>();
  cfg.d = j.at("d").get<int>();
  cfg.d_hidden = j.at("d_hidden").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.kernel = j.at("kernel").get<int>();
  cfg.attention = attention_kind_from_string(j.at("attention").get<std::string>());
  cfg.merge = merge_kind_from_string(j.at("merge").get<std::string>());
  cfg.dropout = j.at("dropout").get<double>();
  cfg.branch_dropout = j.at("branch_dropout").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

nlohmann::json encoder_config_to_json(const EncoderConfig& cfg) {
  nlohmann::json j;
  j["num_blocks"] = cfg.num_blocks;
  j["feature_dim"] = cfg.feature_dim;
  j["d"] = cfg.d;
  j["d_hidden"] = cfg.d_hidden;
  j["heads"] = cfg.heads;
  j["kernel"] = cfg.kernel;
  j["attention"] = to_string(cfg.attention);
  j["merge"] = to_string(cfg.merge);
  j["dropout"] = cfg.dropout;
  j["branch_dropout"] = cfg.branch_dropout;
  j["seed"] = cfg.seed;
  return j;
}

EncoderConfig load_encoder_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
  return encoder_config_from_json(j);
}

}  // namespace bf
