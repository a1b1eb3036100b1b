#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cma/errors.hpp"
#include "cma/metrics.hpp"

namespace cma {

/// Parsed view of the training metrics log (one JSON object per line).
struct MetricsLog {
  struct StepRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double loss = 0.0, reg = 0.0, ta = 0.0, sd = 0.0, grad_norm = 0.0;
  };
  struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_miou = 0.0;
    std::map<std::string, double> val_r1;
    bool has_val = false;
  };
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

inline MetricsLog parse_metrics_log(std::istream& in,
                                    const std::string& where = "metrics log") {
  MetricsLog log;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const std::string type = j.at("type").get<std::string>();
      if (type == "step") {
        MetricsLog::StepRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.step = j.at("step").get<std::int64_t>();
        r.loss = j.at("loss").get<double>();
        r.reg = j.at("reg").get<double>();
        r.ta = j.at("ta").get<double>();
        r.sd = j.at("sd").get<double>();
        r.grad_norm = j.at("grad_norm").get<double>();
        log.steps.push_back(r);
      } else if (type == "epoch") {
        MetricsLog::EpochRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.train_loss = j.at("train_loss").get<double>();
        if (j.contains("val_miou")) {
          r.has_val = true;
          r.val_miou = j.at("val_miou").get<double>();
          if (j.contains("val_r1"))
            for (const auto& [k, v] : j.at("val_r1").items())
              r.val_r1[k] = v.get<double>();
        }
        log.epochs.push_back(std::move(r));
      }
      // unknown record types pass through silently: logs may grow fields
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return log;
}

inline MetricsLog parse_metrics_log_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open metrics log: " + path);
  return parse_metrics_log(in, path);
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

/// Maps data points into an SVG polyline inside the given plot box.
inline std::string polyline(const std::vector<double>& xs,
                            const std::vector<double>& ys, double x0,
                            double y0, double w, double h, double xmin,
                            double xmax, double ymin, double ymax,
                            const std::string& color) {
  std::ostringstream out;
  out << "<polyline fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"1.5\" points=\"";
  const double xspan = xmax > xmin ? xmax - xmin : 1.0;
  const double yspan = ymax > ymin ? ymax - ymin : 1.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double px = x0 + w * (xs[i] - xmin) / xspan;
    const double py = y0 + h - h * (ys[i] - ymin) / yspan;
    out << fmt(px) << "," << fmt(py) << " ";
  }
  out << "\"/>";
  return out.str();
}

}  // namespace detail

/// Per-epoch train loss (and validation mIoU when present) as a standalone
/// SVG. A single epoch renders as a dot-sized polyline, which is fine.
inline std::string loss_curve_svg(const MetricsLog& log) {
  if (log.epochs.empty()) throw DataError("loss curve: empty metrics log");
  const int W = 640, H = 360, M = 50;
  std::vector<double> xs, loss, miou;
  bool any_val = false;
  for (const auto& e : log.epochs) {
    xs.push_back(e.epoch);
    loss.push_back(e.train_loss);
    if (e.has_val) any_val = true;
  }
  double lmin = *std::min_element(loss.begin(), loss.end());
  double lmax = *std::max_element(loss.begin(), loss.end());
  if (lmin == lmax) {
    lmin -= 0.5;
    lmax += 0.5;
  }
  const double xmin = xs.front(), xmax = xs.back();

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<rect x=\"" << M << "\" y=\"" << M << "\" width=\"" << W - 2 * M
      << "\" height=\"" << H - 2 * M
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
  out << detail::polyline(xs, loss, M, M, W - 2 * M, H - 2 * M, xmin, xmax,
                          lmin, lmax, "#c0392b")
      << "\n";
  out << "<text x=\"" << M << "\" y=\"" << M - 10
      << "\" font-size=\"13\">train loss by epoch (min "
      << detail::fmt(lmin) << ", max " << detail::fmt(lmax) << ")</text>\n";
  if (any_val) {
    std::vector<double> vx, vy;
    for (const auto& e : log.epochs)
      if (e.has_val) {
        vx.push_back(e.epoch);
        vy.push_back(e.val_miou);
      }
    out << detail::polyline(vx, vy, M, M, W - 2 * M, H - 2 * M, xmin, xmax,
                            0.0, 100.0, "#2980b9")
        << "\n";
    out << "<text x=\"" << M << "\" y=\"" << H - 12
        << "\" font-size=\"13\" fill=\"#2980b9\">validation mIoU (0-100 "
           "scale)</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

/// 20-bucket IoU histogram over [0,1]; bucket mass equals the sample count.
inline std::string iou_histogram_svg(const std::vector<double>& ious) {
  if (ious.empty()) throw DataError("iou histogram: no samples");
  constexpr int kBuckets = 20;
  std::vector<int> counts(kBuckets, 0);
  for (double v : ious) {
    const double c = std::clamp(v, 0.0, 1.0);
    ++counts[std::min(kBuckets - 1, static_cast<int>(c * kBuckets))];
  }
  const int W = 640, H = 360, M = 50;
  const int peak = *std::max_element(counts.begin(), counts.end());
  const double bw = static_cast<double>(W - 2 * M) / kBuckets;

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int b = 0; b < kBuckets; ++b) {
    const double frac = peak ? static_cast<double>(counts[b]) / peak : 0.0;
    const double bh = frac * (H - 2 * M);
    out << "<rect x=\"" << detail::fmt(M + b * bw) << "\" y=\""
        << detail::fmt(H - M - bh) << "\" width=\"" << detail::fmt(bw - 2)
        << "\" height=\"" << detail::fmt(bh)
        << "\" fill=\"#27ae60\"><title>bucket " << b << ": " << counts[b]
        << "</title></rect>\n";
  }
  out << "<text x=\"" << M << "\" y=\"" << M - 10
      << "\" font-size=\"13\">IoU distribution, " << ious.size()
      << " samples</text>\n";
  out << "</svg>\n";
  return out.str();
}

/// Human-readable recap of a metrics log plus an optional final report.
inline std::string summarize(const MetricsLog& log,
                             const EvalReport* final_report = nullptr) {
  if (log.epochs.empty() && log.steps.empty())
    throw DataError("summary: empty metrics log");
  std::ostringstream out;
  out << "epochs: " << log.epochs.size()
      << ", optimizer steps: " << log.steps.size() << "\n";
  if (!log.epochs.empty()) {
    const auto& first = log.epochs.front();
    const auto& last = log.epochs.back();
    out << "train loss: " << detail::fmt(first.train_loss) << " -> "
        << detail::fmt(last.train_loss) << "\n";
    const auto best = std::max_element(
        log.epochs.begin(), log.epochs.end(),
        [](const auto& a, const auto& b) {
          return (a.has_val ? a.val_miou : -1.0) <
                 (b.has_val ? b.val_miou : -1.0);
        });
    if (best != log.epochs.end() && best->has_val) {
      out << "best validation mIoU: " << detail::fmt(best->val_miou)
          << " at epoch " << best->epoch << "\n";
    }
  }
  if (final_report != nullptr) out << format_report(*final_report);
  return out.str();
}

}  // namespace cma
