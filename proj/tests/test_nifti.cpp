#include <doctest.h>

#include <fstream>

#include "cmrseg/nifti.hpp"
#include "fixtures.hpp"

using namespace cmrseg;

TEST_CASE("scan round trip through plain and gzip files") {
  fixtures::TempDir tmp;
  ScanVolume v({5, 4, 3}, {1.25, 1.5, 6.0});
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i) * 0.5f - 3.0f;
  for (const char* name : {"a.nii", "a.nii.gz"}) {
    write_scan(tmp / name, v);
    const ScanVolume r = read_scan(tmp / name);
    CHECK(r.shape == v.shape);
    CHECK(r.spacing[0] == doctest::Approx(1.25));
    CHECK(r.spacing[2] == doctest::Approx(6.0));
    CHECK(r.voxels == v.voxels);
  }
}

TEST_CASE("label round trip keeps values and the template header's orientation bytes") {
  fixtures::TempDir tmp;
  LabelVolume l({6, 6, 2}, {1.0, 1.0, 5.0}, 0);
  l.at(1, 2, 1) = 3;
  l.at(4, 4, 0) = 1;
  NiftiHeader tmpl = NiftiHeader::make({6, 6, 2}, {1.0, 1.0, 5.0});
  tmpl.bytes[252] = 1;  // qform_code
  write_labels(tmp / "l.nii.gz", l, tmpl);
  const NiftiImage img = read_nifti(tmp / "l.nii.gz");
  CHECK(img.header.bytes[252] == 1);
  const LabelVolume r = read_labels(tmp / "l.nii.gz");
  CHECK(r.voxels == l.voxels);
}

TEST_CASE("labels outside the class set are rejected") {
  fixtures::TempDir tmp;
  ScanVolume v({2, 2, 1}, {1.0, 1.0, 1.0}, 0.0f);
  v.voxels[3] = 5.0f;
  write_scan(tmp / "bad.nii", v);
  CHECK_THROWS_WITH_AS(read_labels(tmp / "bad.nii"), doctest::Contains("5"), std::runtime_error);
}

TEST_CASE("missing and truncated files produce errors") {
  fixtures::TempDir tmp;
  CHECK_THROWS(read_nifti(tmp / "none.nii"));
  std::ofstream(tmp / "short.nii") << "not a nifti file";
  CHECK_THROWS(read_nifti(tmp / "short.nii"));
}
