#include "mdf/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mdf {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shp, double fill_value) : shape(std::move(shp)) {
  data.assign(static_cast<size_t>(numel_of(shape)), fill_value);
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape = {1};
  t.data = {v};
  return t;
}

Tensor Tensor::from(std::vector<int> shp, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(shp);
  if (numel_of(t.shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("value count does not match shape " + shape_str(t.shape));
  t.data = std::move(values);
  return t;
}

void Tensor::check_finite(const char* what) const {
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

void Tensor::fill(double v) {
  for (double& x : data) x = v;
}

}  // namespace mdf
