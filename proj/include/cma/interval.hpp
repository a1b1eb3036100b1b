#pragma once

#include <algorithm>
#include <utility>

namespace cma {

/// Normalized time interval. Ground truth satisfies 0 <= start <= end <= 1;
/// raw model predictions may violate both until sanitized for metrics.
struct TimeInterval {
  double start = 0.0;
  double end = 0.0;

  double length() const { return end - start; }
};

/// Clamp to [0,1] and reorder so start <= end. Applied to predictions before
/// metric computation only, never inside the loss.
inline TimeInterval sanitize_for_metrics(TimeInterval t) {
  t.start = std::clamp(t.start, 0.0, 1.0);
  t.end = std::clamp(t.end, 0.0, 1.0);
  if (t.start > t.end) std::swap(t.start, t.end);
  return t;
}

/// Seconds -> normalized coordinates.
inline TimeInterval normalize_interval(double start_s, double end_s,
                                       double duration) {
  return {start_s / duration, end_s / duration};
}

/// Normalized -> seconds.
inline std::pair<double, double> denormalize_interval(TimeInterval t,
                                                      double duration) {
  return {t.start * duration, t.end * duration};
}

}  // namespace cma
