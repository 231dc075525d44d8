#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdf {

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense real-valued N-d array, row-major. Feature maps use order
// batch x channels x height x width.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp, double fill = 0.0);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int> shp, std::vector<double> values);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool defined() const { return !shape.empty() || !data.empty(); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // [B,C,H,W] accessor
  double& at4(int b, int c, int y, int x) {
    return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  double at4(int b, int c, int y, int x) const {
    return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  // [N,C] accessor
  double& at2(int n, int c) { return data[static_cast<size_t>(n) * shape[1] + c]; }
  double at2(int n, int c) const { return data[static_cast<size_t>(n) * shape[1] + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  void check_finite(const char* what) const;
  void fill(double v);
};

}  // namespace mdf
