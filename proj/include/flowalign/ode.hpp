#ifndef FLOWALIGN_ODE_HPP
#define FLOWALIGN_ODE_HPP

#include "flowalign/numerics.hpp"
#include "flowalign/velocity_field.hpp"

#include <functional>
#include <string_view>

namespace flowalign {

enum class OdeMethod { euler, rk4 };
enum class OdeDirection { forward, backward };

std::string_view to_string(OdeMethod method);
OdeMethod parse_ode_method(std::string_view name);

struct OdeSolveConfig {
  Index steps = 100;
  OdeMethod method = OdeMethod::rk4;
  OdeDirection direction = OdeDirection::forward;

  void validate() const;
};

/// Called at every grid node (including both endpoints) with the node time and state.
using OdeObserver = std::function<void(Index node, double t, const DenseMatrix& state)>;

/// Fixed-step integration of dz/dt = v(z, t) over [0, 1] (forward) or [1, 0] (backward),
/// step size 1/steps. Grid times are computed as i/steps, never accumulated.
DenseMatrix integrate(const VelocityField& field, DenseMatrix state, const OdeSolveConfig& config,
                      const OdeObserver& observer = nullptr);

}  // namespace flowalign

#endif  // FLOWALIGN_ODE_HPP
