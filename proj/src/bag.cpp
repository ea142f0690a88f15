#include "factorforge/bag.hpp"

#include <stdexcept>

namespace factorforge {

std::string describe_origin(const SampleBag& bag) {
  if (const auto* s = std::get_if<SyntheticOrigin>(&bag.origin))
    return "synthetic:" + std::to_string(s->seed) + "/" + std::to_string(s->index);
  const auto& m = std::get<MarketOrigin>(bag.origin);
  return "market:" + m.ticker + "@" + m.date;
}

SampleBag concatenate_bags(std::span<const SampleBag> bags) {
  if (bags.empty()) throw std::invalid_argument("concatenate_bags: no bags");
  SampleBag out;
  out.w = bags.front().w;
  out.origin = bags.front().origin;
  Eigen::Index rows = 0;
  for (const auto& b : bags) {
    if (b.w != out.w || b.inputs.cols() != bags.front().inputs.cols())
      throw std::invalid_argument("concatenate_bags: bags disagree on the input width");
    rows += b.m();
  }
  out.inputs.resize(rows, bags.front().inputs.cols());
  out.targets.resize(rows);
  Eigen::Index at = 0;
  for (const auto& b : bags) {
    out.inputs.middleRows(at, b.m()) = b.inputs;
    out.targets.segment(at, b.m()) = b.targets;
    at += b.m();
  }
  return out;
}

}  // namespace factorforge
