#pragma once

#include <string>
#include <vector>

#include "seqrec/eval.hpp"

namespace seqrec {

struct Curve {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// One polyline per curve; with two or more curves a shaded band spans the
// per-x minimum and maximum over the x values every curve shares.
std::string line_chart_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& x_label,
                           const std::string& y_label);

// Positive and negative Q histograms drawn over the same bins.
std::string q_histogram_svg(const QDistributionReport& report, const std::string& title);

}  // namespace seqrec
