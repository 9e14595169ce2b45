#include "bcosdiff/model.hpp"

#include <charconv>
#include <sstream>

namespace bcosdiff {

const char* target_name(Target t) { return t == Target::kX0 ? "x0" : "eps"; }

Target parse_target(const std::string& name) {
  if (name == "x0") return Target::kX0;
  if (name == "eps") return Target::kEps;
  throw ConfigError("unknown prediction target '" + name + "' (expected x0 or eps)");
}

void ModelConfig::validate() const {
  if (channel_mult.empty()) throw ConfigError("model: at least one level required");
  if (attention.size() != channel_mult.size()) throw ConfigError("model: attention flags must match the level count");
  for (Index m : channel_mult) {
    if (m < 1) throw ConfigError("model: channel multipliers must be >= 1");
  }
  if (channel_mult.size() > 1 && channel_mult[1] != channel_mult[0]) {
    throw ConfigError("model: the first downsampling step must keep the channel count");
  }
  if (base_channels < 1 || context_dim < 1 || time_dim < 1 || time_channels < 1) {
    throw ConfigError("model: widths must be positive");
  }
  if (heads < 1 || base_channels % heads != 0) throw ConfigError("model: base width must be divisible by the head count");
  if (max_tokens < 3) throw ConfigError("model: max_tokens must leave room for SOS/EOS");
  if (time_features < 2 || time_features % 2 != 0) throw ConfigError("model: time_features must be even");
  const Index factor = Index(1) << (levels() - 1);
  if (image_size < 1 || image_size % factor != 0) {
    throw ConfigError("model: image size " + std::to_string(image_size) + " not divisible by " + std::to_string(factor));
  }
  if (!(bcos_b >= 1)) throw ConfigError("model: B must be >= 1");
  make_schedule(T, beta_start, beta_end, mu, sigma, schedule_shape);
}

namespace {

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(static_cast<long long>(v[i]));
  return s;
}

std::string fmt(double x) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

long long to_int(const std::string& key, const std::string& v) {
  long long x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  return x;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config: " + key + " expects an unsigned integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  double x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

std::vector<long long> to_list(const std::string& key, const std::string& v) {
  std::vector<long long> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(key, item));
  return out;
}

}  // namespace

std::map<std::string, std::string> ModelConfig::entries() const {
  std::vector<Index> attn(attention.begin(), attention.end());
  return {
      {"image_size", std::to_string(image_size)},
      {"base_channels", std::to_string(base_channels)},
      {"channel_mult", join(channel_mult)},
      {"attention", join(attn)},
      {"mid_attention", mid_attention ? "true" : "false"},
      {"heads", std::to_string(heads)},
      {"context_dim", std::to_string(context_dim)},
      {"max_tokens", std::to_string(max_tokens)},
      {"time_features", std::to_string(time_features)},
      {"time_dim", std::to_string(time_dim)},
      {"time_channels", std::to_string(time_channels)},
      {"bcos_b", fmt(bcos_b)},
      {"attention_output_bcos", attention_output_bcos ? "true" : "false"},
      {"target", target_name(target)},
      {"init_seed", std::to_string(init_seed)},
      {"T", std::to_string(T)},
      {"beta_start", fmt(beta_start)},
      {"beta_end", fmt(beta_end)},
      {"mu", fmt(mu)},
      {"sigma", fmt(sigma)},
      {"schedule_shape", schedule_shape_name(schedule_shape)},
  };
}

std::string ModelConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries()) out += k + "=" + v + "\n";
  return out;
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "image_size") image_size = to_int(key, value);
  else if (key == "base_channels") base_channels = to_int(key, value);
  else if (key == "channel_mult") {
    channel_mult.clear();
    for (long long m : to_list(key, value)) channel_mult.push_back(m);
  } else if (key == "attention") {
    attention.clear();
    for (long long m : to_list(key, value)) attention.push_back(m != 0);
  } else if (key == "mid_attention") mid_attention = to_bool(key, value);
  else if (key == "heads") heads = to_int(key, value);
  else if (key == "context_dim") context_dim = to_int(key, value);
  else if (key == "max_tokens") max_tokens = to_int(key, value);
  else if (key == "time_features") time_features = to_int(key, value);
  else if (key == "time_dim") time_dim = to_int(key, value);
  else if (key == "time_channels") time_channels = to_int(key, value);
  else if (key == "bcos_b") bcos_b = to_double(key, value);
  else if (key == "attention_output_bcos") attention_output_bcos = to_bool(key, value);
  else if (key == "target") target = parse_target(value);
  else if (key == "init_seed") init_seed = to_u64(key, value);
  else if (key == "T") T = static_cast<int>(to_int(key, value));
  else if (key == "beta_start") beta_start = to_double(key, value);
  else if (key == "beta_end") beta_end = to_double(key, value);
  else if (key == "mu") mu = to_double(key, value);
  else if (key == "sigma") sigma = to_double(key, value);
  else if (key == "schedule_shape") schedule_shape = parse_schedule_shape(value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: malformed line '" + line + "'");
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace bcosdiff
