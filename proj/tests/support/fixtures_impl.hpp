#pragma once

#include "tumorseg/nn.hpp"

namespace tumorseg::testing {

namespace detail {

class RandomFill : public ParameterVisitor<double> {
 public:
  RandomFill(std::uint64_t seed, double stddev) : rng_(seed), dist_(0.0, stddev) {}
  void parameter(const std::string&, Var<double>& p) override {
    for (Index i = 0; i < p.value().size(); ++i) p.mutable_value().data()[i] = dist_(rng_);
  }
  void buffer(const std::string&, Tensor<double>&) override {}

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_;
};

}  // namespace detail

template <typename Module>
void randomize_parameters(Module& m, std::uint64_t seed, double stddev) {
  detail::RandomFill fill(seed, stddev);
  m.visit(fill, "");
}

}  // namespace tumorseg::testing
