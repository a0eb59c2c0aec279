#include <doctest.h>

#include "helpers.hpp"
#include "trajdistill/data.hpp"
#include "trajdistill/gradcheck.hpp"

#include <Eigen/Dense>

#include <fstream>

using namespace trajdistill;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

// 4 images of 2x3 with pixels 10*i + k, labels 3, 1, 4, 1.
void write_idx_fixture(const std::filesystem::path& images, const std::filesystem::path& labels, int label_count = 4) {
  std::vector<unsigned char> img;
  for (auto v : {0x00000803u, 4u, 2u, 3u})
    for (auto b : be32(v)) img.push_back(b);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 6; ++k) img.push_back(static_cast<unsigned char>(10 * i + k));
  write_bytes(images, img);
  std::vector<unsigned char> lab;
  for (auto v : {0x00000801u, static_cast<unsigned>(label_count)})
    for (auto b : be32(v)) lab.push_back(b);
  for (unsigned char l : {3, 1, 4, 1}) lab.push_back(l);
  write_bytes(labels, lab);
}

}  // namespace

TEST_CASE("gen_blobs with zero spread collapses each class") {
  const LabeledDataset d = gen_blobs(3, 5, {4}, 0.0, 1);
  const auto groups = d.by_class();
  for (const auto& g : groups) {
    for (Index i : g)
      for (Index k = 0; k < 4; ++k) CHECK(d.images[i * 4 + k] == d.images[g[0] * 4 + k]);
  }
}

TEST_CASE("gen_blobs counts and ranges") {
  for (const Shape& s : {Shape{16}, Shape{1, 8, 8}}) {
    const LabeledDataset d = gen_blobs(3, 100, s, 0.3, 2);
    CHECK(d.size() == 300);
    for (const auto& g : d.by_class()) CHECK(g.size() == 100);
    CHECK(d.images.array().minCoeff() >= 0.0);
    CHECK(d.images.array().maxCoeff() <= 1.0);
    CHECK_NOTHROW(d.validate());
    CHECK(gen_blobs(3, 100, s, 0.3, 2).images == d.images);
  }
}

TEST_CASE("a linear classifier separates well-separated blobs") {
  // Reference multinomial logistic regression by full-batch gradient descent.
  const LabeledDataset d = gen_blobs(3, 100, {8}, 0.05, 3);
  const Index n = d.size(), dim = 8, c = 3;
  Eigen::MatrixXd x = Eigen::Map<const Eigen::MatrixXd>(d.images.data(), dim, n).transpose();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, c);
  for (Index i = 0; i < n; ++i) y(i, d.labels[static_cast<std::size_t>(i)]) = 1.0;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(dim, c);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(c);
  for (int it = 0; it < 500; ++it) {
    Eigen::MatrixXd z = (x * w).rowwise() + b;
    for (Index i = 0; i < n; ++i) {
      z.row(i).array() -= z.row(i).maxCoeff();
      z.row(i) = z.row(i).array().exp().matrix();
      z.row(i) /= z.row(i).sum();
    }
    const Eigen::MatrixXd g = (z - y) / static_cast<double>(n);
    w -= 2.0 * x.transpose() * g;
    b -= 2.0 * g.colwise().sum();
  }
  const Eigen::MatrixXd z = (x * w).rowwise() + b;
  int correct = 0;
  for (Index i = 0; i < n; ++i) {
    Index k;
    z.row(i).maxCoeff(&k);
    correct += k == d.labels[static_cast<std::size_t>(i)];
  }
  CHECK(correct >= 297);
}

TEST_CASE("split_per_class keeps the leading samples of every class") {
  const LabeledDataset d = gen_blobs(3, 10, {2}, 0.3, 4);
  const auto [head, tail] = split_per_class(d, 4);
  CHECK(head.size() == 12);
  CHECK(tail.size() == 18);
  for (const auto& g : head.by_class()) CHECK(g.size() == 4);
  CHECK_THROWS_AS(split_per_class(d, 11), std::invalid_argument);
}

TEST_CASE("IDX fixture parses to the known shape and values") {
  testing::TempDir dir("idx");
  write_idx_fixture(dir / "img", dir / "lab");
  const LabeledDataset d = load_idx(dir / "img", dir / "lab");
  CHECK(d.images.shape() == Shape{4, 1, 2, 3});
  CHECK(d.labels == std::vector<int>{3, 1, 4, 1});
  CHECK(d.class_count == 5);
  CHECK(d.images[0] == 0.0);
  CHECK(d.images[6 * 2 + 5] == 25.0 / 255.0);
}

TEST_CASE("IDX errors carry distinct codes") {
  testing::TempDir dir("idx_bad");
  write_idx_fixture(dir / "img", dir / "lab", 3);
  try {
    load_idx(dir / "img", dir / "lab");
    FAIL("expected count mismatch");
  } catch (const DataError& e) {
    CHECK(e.code() == DataErrorCode::count_mismatch);
    CHECK(std::string(e.what()).find("label/image count mismatch") != std::string::npos);
  }
  write_bytes(dir / "empty", {});
  try {
    load_idx(dir / "empty", dir / "lab");
    FAIL("expected truncated header");
  } catch (const DataError& e) {
    CHECK(e.code() == DataErrorCode::truncated_header);
    CHECK(std::string(e.what()).find("truncated header") != std::string::npos);
  }
  write_bytes(dir / "magic", {0, 0, 8, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  try {
    load_idx(dir / "magic", dir / "lab");
    FAIL("expected bad magic");
  } catch (const DataError& e) {
    CHECK(e.code() == DataErrorCode::bad_magic);
  }
}

TEST_CASE("CSV loader scales 0..255 rows and keeps unit rows") {
  testing::TempDir dir("csv");
  {
    std::ofstream(dir / "a.csv") << "0,0,255,51\n1,255,0,0\n";
    std::ofstream(dir / "b.csv") << "1,0.5,0.25,1\n0,0,0,0\n";
  }
  const CsvLoad a = load_csv(dir / "a.csv");
  CHECK(a.scaled_from_255);
  CHECK(a.data.images.shape() == Shape{2, 3});
  CHECK(a.data.images[2] == doctest::Approx(0.2));
  const CsvLoad b = load_csv(dir / "b.csv");
  CHECK_FALSE(b.scaled_from_255);
  CHECK(b.data.labels == std::vector<int>{1, 0});
  CHECK(b.data.images[1] == 0.25);
}

TEST_CASE("augmentation: disabled policy is the identity, flip is an involution") {
  Graph g;
  const Tensor x = testing::random_tensor({2, 1, 4, 5}, 1, 0, 1);
  Var xv = g.constant(x);
  CHECK(augment(xv, AugmentationPolicy{}, 9).value() == x);
  AugmentationPolicy flip;
  flip.flip = true;
  Var once = augment(xv, flip, 9);
  CHECK_FALSE(once.value() == x);
  CHECK(augment(once, flip, 9).value() == x);
}

TEST_CASE("augmentation is siamese and seeded") {
  AugmentationPolicy p;
  p.flip = true;
  p.shift = 2;
  p.scale = 0.2;
  Tensor x({3, 1, 6, 6});
  const Tensor one = testing::random_tensor({1, 1, 6, 6}, 4, 0, 1);
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < 36; ++k) x[i * 36 + k] = one[k];
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Graph g;
    const Tensor y = augment(g.constant(x), p, seed).value();
    CHECK(y.shape() == x.shape());
    for (Index i = 1; i < 3; ++i)
      for (Index k = 0; k < 36; ++k) CHECK(y[i * 36 + k] == y[k]);
    Graph h;
    CHECK(augment(h.constant(x), p, seed).value() == y);
  }
}

TEST_CASE("gradient of the mean augmented image matches finite differences") {
  const Tensor x = testing::random_tensor({2, 1, 5, 5}, 6, 0, 1);
  for (const auto& [flip, shift, scale] : {std::tuple{true, 0, 0.0}, {false, 2, 0.0}, {false, 0, 0.3}}) {
    AugmentationPolicy p;
    p.flip = flip;
    p.shift = shift;
    p.scale = scale;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const CheckResult r =
          check_first_order("augment", [&](const Var& v) { return mean(square(augment(v, p, seed))); }, x, 1e-5, 1e-6);
      INFO(r.rel_error);
      CHECK(r.passed());
    }
  }
}
