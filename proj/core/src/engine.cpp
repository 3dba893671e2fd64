#include "viewdelta/engine.hpp"

#include <cstdlib>

namespace viewdelta {

std::string_view to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

Precision parse_precision(std::string_view text) {
  if (text == "f32" || text == "float32" || text == "32") return Precision::f32;
  if (text == "f64" || text == "float64" || text == "64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + std::string(text) + "' (expected f32 or f64)");
}

Precision precision_from_env() {
  const char* env = std::getenv("VIEWDELTA_PRECISION");
  if (env == nullptr || *env == '\0') return Precision::f32;
  return parse_precision(env);
}

EngineConfig& engine_config() {
  static EngineConfig config{precision_from_env(), {}};
  return config;
}

Precision engine_precision() { return engine_config().precision; }

void set_engine_precision(Precision p) { engine_config().precision = p; }

bool fault_injected(std::string_view op) {
  const auto& fault = engine_config().inject_fault;
  return !fault.empty() && fault == op;
}

}  // namespace viewdelta
