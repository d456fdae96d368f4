// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dmf;

TEST(Shape, NumelAndRank) {
  const Shape s{2, 3, 4, 5};
  EXPECT_EQ(s.rank(), 4);
  EXPECT_EQ(s.numel(), 120);
  EXPECT_EQ(s.str(), "[2,3,4,5]");
  EXPECT_EQ(Shape{7}.numel(), 7);
}

TEST(Shape, RejectsBadExtents) {
  EXPECT_THROW((Shape{2, 0, 3}), ShapeError);
  EXPECT_THROW((Shape{-1}), ShapeError);
  EXPECT_THROW((Shape{1, 2, 3, 4, 5}), ShapeError);
  EXPECT_THROW(Shape(std::span<const index_t>{}), ShapeError);
}

TEST(Shape, AxisOutOfRange) {
  const Shape s{2, 3};
  EXPECT_THROW(s[2], ShapeError);
  EXPECT_THROW(s[-1], ShapeError);
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  const Tensor t(Shape{2, 2}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(t.numel(), 4);
  EXPECT_DOUBLE_EQ(t[3], 4.0);
}

TEST(Tensor, RowMajorIndexing) {
  std::vector<double> v(2 * 3 * 4 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const Tensor t(Shape{2, 3, 4, 5}, v);
  EXPECT_DOUBLE_EQ(t.at(1, 2, 3, 4), 119.0);
  EXPECT_DOUBLE_EQ(t.at(0, 1, 0, 0), 20.0);
  EXPECT_DOUBLE_EQ(t.at(0, 0, 1, 2), 7.0);
}

TEST(Tensor, CopiesShareStorageAndIdentity) {
  const Tensor a = Tensor::full(Shape{3}, 2.0);
  const Tensor b = a;
  EXPECT_EQ(a.id(), b.id());
  EXPECT_NE(a.id(), Tensor::full(Shape{3}, 2.0).id());
}

TEST(Tensor, UndefinedUseThrows) {
  const Tensor t;
  EXPECT_FALSE(t.defined());
  EXPECT_THROW(t.shape(), std::logic_error);
}

TEST(Tensor, ItemRequiresSingleElement) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.5).item(), 4.5);
  EXPECT_THROW(Tensor::zeros(Shape{2}).item(), ShapeError);
}

TEST(Tensor, AllFinite) {
  EXPECT_TRUE(Tensor::zeros(Shape{2, 2}).all_finite());
  EXPECT_FALSE(Tensor(Shape{2}, {1.0, std::nan("")}).all_finite());
  EXPECT_FALSE(Tensor(Shape{1}, {INFINITY}).all_finite());
}

TEST(Tensor, SameShapeDiagnosticNamesDimension) {
  const Tensor a = Tensor::zeros(Shape{1, 3, 4, 4});
  const Tensor b = Tensor::zeros(Shape{1, 3, 5, 4});
  try {
    require_same_shape(a, b, "probe");
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension 2"), std::string::npos) << e.what();
  }
}
