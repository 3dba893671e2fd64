#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace viewdelta {

/// Floating-point width used by every graph in the process.
enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

/// Process-wide engine settings. Precision is chosen once per run (defaults
/// to $VIEWDELTA_PRECISION, else f32); mixed-precision graphs do not exist.
struct EngineConfig {
  Precision precision = Precision::f32;
  /// Name of a backward rule to perturb on purpose ("gelu", "matmul",
  /// "layer_norm"); used to prove the gradient checker can fail.
  std::string inject_fault;
};

EngineConfig& engine_config();
Precision engine_precision();
void set_engine_precision(Precision p);

/// Reads VIEWDELTA_PRECISION ("f32"/"f64"); unset means f32.
Precision precision_from_env();

/// Calls fn.template operator()<Real>() with Real matching the global precision.
template <typename Fn>
decltype(auto) dispatch_precision(Precision p, Fn&& fn) {
  if (p == Precision::f64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

bool fault_injected(std::string_view op);

}  // namespace viewdelta
