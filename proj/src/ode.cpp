#include "flowalign/ode.hpp"

#include <stdexcept>
#include <string>

namespace flowalign {

std::string_view to_string(OdeMethod method) { return method == OdeMethod::euler ? "euler" : "rk4"; }

OdeMethod parse_ode_method(std::string_view name) {
  if (name == "euler") return OdeMethod::euler;
  if (name == "rk4") return OdeMethod::rk4;
  throw std::invalid_argument("unknown ODE method '" + std::string(name) + "'");
}

void OdeSolveConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("ode: steps must be >= 1");
}

DenseMatrix integrate(const VelocityField& field, DenseMatrix state, const OdeSolveConfig& config,
                      const OdeObserver& observer) {
  config.validate();
  const Index n = state.rows();
  const double steps = static_cast<double>(config.steps);
  const bool forward = config.direction == OdeDirection::forward;
  auto node_time = [&](Index i) {
    const double s = static_cast<double>(i) / steps;
    return forward ? s : 1.0 - s;
  };
  auto eval = [&](const DenseMatrix& z, double t) {
    return field.velocity(z, DenseVector::Constant(n, t));
  };

  if (observer) observer(0, node_time(0), state);
  for (Index i = 0; i < config.steps; ++i) {
    const double t0 = node_time(i);
    const double t1 = node_time(i + 1);
    const double h = t1 - t0;
    if (config.method == OdeMethod::euler) {
      state += h * eval(state, t0);
    } else {
      const double tm = 0.5 * (t0 + t1);
      const DenseMatrix k1 = eval(state, t0);
      const DenseMatrix k2 = eval(state + (0.5 * h) * k1, tm);
      const DenseMatrix k3 = eval(state + (0.5 * h) * k2, tm);
      const DenseMatrix k4 = eval(state + h * k3, t1);
      state += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!state.allFinite()) {
      throw NumericError("ode: non-finite state after step " + std::to_string(i + 1) + " (t=" +
                         std::to_string(t1) + ")");
    }
    if (observer) observer(i + 1, t1, state);
  }
  return state;
}

}  // namespace flowalign
