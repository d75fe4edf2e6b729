#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ctxsel/evaluation.hpp"

namespace ctxsel {

// Standalone SVG documents. Coordinates are printed with fixed precision so
// the same inputs always give the same bytes.

std::string pr_curves_svg(const std::vector<std::pair<std::string, PrCurve>>& curves,
                          const std::string& title);

// One polyline per method, mAP against precision threshold.
std::string sweep_svg(const std::vector<SweepRow>& rows);

// Target box solid yellow, selected contexts solid red, unselected contexts
// dashed blue.
std::string trace_svg(const TraceRecord& trace, int width, int height, const ClassVocab& vocab);

}  // namespace ctxsel
