#include "cmrseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cmrseg {
namespace {

// Field offsets inside the 348-byte NIfTI-1 header.
constexpr std::size_t kSizeofHdr = 0;
constexpr std::size_t kDim = 40;
constexpr std::size_t kDatatype = 70;
constexpr std::size_t kBitpix = 72;
constexpr std::size_t kPixdim = 76;
constexpr std::size_t kVoxOffset = 108;
constexpr std::size_t kSclSlope = 112;
constexpr std::size_t kSclInter = 116;
constexpr std::size_t kQformCode = 252;
constexpr std::size_t kSformCode = 254;
constexpr std::size_t kSrowX = 280;
constexpr std::size_t kMagic = 344;

template <typename T>
T get(const unsigned char* base, std::size_t off) {
  T v;
  std::memcpy(&v, base + off, sizeof(T));
  return v;
}

template <typename T>
void put(unsigned char* base, std::size_t off, T v) {
  std::memcpy(base + off, &v, sizeof(T));
}

void swap_bytes(unsigned char* p, std::size_t width, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) std::reverse(p + i * width, p + (i + 1) * width);
}

// Swaps every multi-byte header field we interpret, plus the orientation
// block so a swapped header can be reused as an output template.
void swap_header(unsigned char* h) {
  swap_bytes(h + kSizeofHdr, 4, 1);
  swap_bytes(h + 32, 4, 1);  // extents
  swap_bytes(h + 36, 2, 1);  // session_error
  swap_bytes(h + kDim, 2, 8);
  swap_bytes(h + 56, 4, 3);  // intent_p1..p3
  swap_bytes(h + 68, 2, 1);  // intent_code
  swap_bytes(h + kDatatype, 2, 1);
  swap_bytes(h + kBitpix, 2, 1);
  swap_bytes(h + 74, 2, 1);  // slice_start
  swap_bytes(h + kPixdim, 4, 8);
  swap_bytes(h + kVoxOffset, 4, 1);
  swap_bytes(h + kSclSlope, 4, 1);
  swap_bytes(h + kSclInter, 4, 1);
  swap_bytes(h + 120, 2, 1);  // slice_end
  swap_bytes(h + 124, 4, 6);  // cal_max .. toffset
  swap_bytes(h + 148, 4, 2);  // glmax, glmin
  swap_bytes(h + kQformCode, 2, 1);
  swap_bytes(h + kSformCode, 2, 1);
  swap_bytes(h + 256, 4, 6);  // quatern_b .. qoffset_z
  swap_bytes(h + kSrowX, 4, 12);
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  // gzread passes uncompressed files through unchanged.
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open NIfTI file: " + path.string());
  std::vector<unsigned char> out;
  std::vector<unsigned char> buf(1 << 20);
  for (;;) {
    int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw std::runtime_error("corrupt NIfTI stream: " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

void write_all(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  const bool gz = path.extension() == ".gz";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  gzFile f = gzopen(path.string().c_str(), gz ? "wb6" : "wbT");
  if (!f) throw std::runtime_error("cannot write NIfTI file: " + path.string());
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 20));
    if (gzwrite(f, bytes.data() + done, chunk) != static_cast<int>(chunk)) {
      gzclose(f);
      throw std::runtime_error("short write: " + path.string());
    }
    done += chunk;
  }
  if (gzclose(f) != Z_OK) throw std::runtime_error("cannot finalize " + path.string());
}

template <typename T>
void convert(const unsigned char* src, std::size_t n, bool swapped, float* dst) {
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, src + i * sizeof(T), sizeof(T));
    if (swapped) std::reverse(tmp, tmp + sizeof(T));
    T v;
    std::memcpy(&v, tmp, sizeof(T));
    dst[i] = static_cast<float>(v);
  }
}

NiftiHeader output_header(const Shape3& shape, const Spacing3& spacing,
                          const std::optional<NiftiHeader>& tmpl) {
  NiftiHeader h = tmpl ? *tmpl : NiftiHeader::make(shape, spacing);
  std::array<short, 8> dim{3, static_cast<short>(shape[0]), static_cast<short>(shape[1]),
                           static_cast<short>(shape[2]), 1, 1, 1, 1};
  h.set_dim(dim);
  auto pd = h.pixdim();
  if (pd[0] != -1.0f) pd[0] = 1.0f;
  pd[1] = static_cast<float>(spacing[0]);
  pd[2] = static_cast<float>(spacing[1]);
  pd[3] = static_cast<float>(spacing[2]);
  h.set_pixdim(pd);
  h.set_vox_offset(352.0f);
  h.set_scaling(1.0f, 0.0f);
  return h;
}

std::vector<unsigned char> serialize(const NiftiHeader& h, const void* data, std::size_t nbytes) {
  std::vector<unsigned char> out(352 + nbytes, 0);
  std::memcpy(out.data(), h.bytes.data(), 348);
  // Four zero extension bytes follow the header.
  std::memcpy(out.data() + 352, data, nbytes);
  return out;
}

}  // namespace

NiftiHeader NiftiHeader::make(const Shape3& shape, const Spacing3& spacing) {
  NiftiHeader h;
  unsigned char* b = h.bytes.data();
  put<int>(b, kSizeofHdr, 348);
  put<char>(b, 38, 'r');  // regular
  h.set_dim({3, static_cast<short>(shape[0]), static_cast<short>(shape[1]),
             static_cast<short>(shape[2]), 1, 1, 1, 1});
  h.set_pixdim({1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                static_cast<float>(spacing[2]), 0.0f, 0.0f, 0.0f, 0.0f});
  h.set_datatype(16, 32);
  h.set_vox_offset(352.0f);
  h.set_scaling(1.0f, 0.0f);
  put<char>(b, 123, 2);  // xyzt_units: mm
  put<short>(b, kSformCode, 1);
  const float srow[12] = {static_cast<float>(spacing[0]), 0, 0, 0,
                          0, static_cast<float>(spacing[1]), 0, 0,
                          0, 0, static_cast<float>(spacing[2]), 0};
  std::memcpy(b + kSrowX, srow, sizeof(srow));
  std::memcpy(b + kMagic, "n+1\0", 4);
  return h;
}

std::array<short, 8> NiftiHeader::dim() const {
  std::array<short, 8> d;
  std::memcpy(d.data(), bytes.data() + kDim, sizeof(d));
  return d;
}
std::array<float, 8> NiftiHeader::pixdim() const {
  std::array<float, 8> p;
  std::memcpy(p.data(), bytes.data() + kPixdim, sizeof(p));
  return p;
}
short NiftiHeader::datatype() const { return get<short>(bytes.data(), kDatatype); }
short NiftiHeader::bitpix() const { return get<short>(bytes.data(), kBitpix); }
float NiftiHeader::vox_offset() const { return get<float>(bytes.data(), kVoxOffset); }
float NiftiHeader::scl_slope() const { return get<float>(bytes.data(), kSclSlope); }
float NiftiHeader::scl_inter() const { return get<float>(bytes.data(), kSclInter); }

void NiftiHeader::set_dim(const std::array<short, 8>& d) {
  std::memcpy(bytes.data() + kDim, d.data(), sizeof(d));
}
void NiftiHeader::set_pixdim(const std::array<float, 8>& p) {
  std::memcpy(bytes.data() + kPixdim, p.data(), sizeof(p));
}
void NiftiHeader::set_datatype(short code, short bits) {
  put<short>(bytes.data(), kDatatype, code);
  put<short>(bytes.data(), kBitpix, bits);
}
void NiftiHeader::set_vox_offset(float v) { put<float>(bytes.data(), kVoxOffset, v); }
void NiftiHeader::set_scaling(float slope, float inter) {
  put<float>(bytes.data(), kSclSlope, slope);
  put<float>(bytes.data(), kSclInter, inter);
}

NiftiImage read_nifti(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("missing NIfTI file: " + path.string());
  const auto raw = read_all(path);
  if (raw.size() < 348) throw std::runtime_error("truncated NIfTI header: " + path.string());

  NiftiImage img;
  std::memcpy(img.header.bytes.data(), raw.data(), 348);
  bool swapped = false;
  if (get<int>(img.header.bytes.data(), kSizeofHdr) != 348) {
    swap_header(img.header.bytes.data());
    swapped = true;
    if (get<int>(img.header.bytes.data(), kSizeofHdr) != 348)
      throw std::runtime_error("not a NIfTI-1 file: " + path.string());
  }

  const auto d = img.header.dim();
  if (d[0] < 1 || d[0] > 7) throw std::runtime_error("invalid NIfTI dim[0] in " + path.string());
  for (int i = 1; i <= 3; ++i) img.shape[i - 1] = i <= d[0] ? std::max<int>(1, d[i]) : 1;
  img.frames = d[0] >= 4 ? std::max<int>(1, d[4]) : 1;
  const auto pd = img.header.pixdim();
  for (int i = 0; i < 3; ++i) {
    const float s = std::fabs(pd[i + 1]);
    img.spacing[i] = s > 0.0f ? s : 1.0;
  }

  const std::size_t n = voxel_count(img.shape) * static_cast<std::size_t>(img.frames);
  const auto offset = static_cast<std::size_t>(std::max(352.0f, img.header.vox_offset()));
  const std::size_t width = static_cast<std::size_t>(img.header.bitpix()) / 8;
  if (width == 0 || raw.size() < offset + n * width)
    throw std::runtime_error("truncated NIfTI data: " + path.string());

  img.data.resize(n);
  const unsigned char* src = raw.data() + offset;
  switch (img.header.datatype()) {
    case 2: convert<std::uint8_t>(src, n, swapped, img.data.data()); break;
    case 4: convert<std::int16_t>(src, n, swapped, img.data.data()); break;
    case 8: convert<std::int32_t>(src, n, swapped, img.data.data()); break;
    case 16: convert<float>(src, n, swapped, img.data.data()); break;
    case 64: convert<double>(src, n, swapped, img.data.data()); break;
    case 256: convert<std::int8_t>(src, n, swapped, img.data.data()); break;
    case 512: convert<std::uint16_t>(src, n, swapped, img.data.data()); break;
    case 768: convert<std::uint32_t>(src, n, swapped, img.data.data()); break;
    default:
      throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(img.header.datatype()) +
                               " in " + path.string());
  }
  const float slope = img.header.scl_slope();
  const float inter = img.header.scl_inter();
  if (slope != 0.0f && std::isfinite(slope) && (slope != 1.0f || inter != 0.0f)) {
    for (float& v : img.data) v = v * slope + inter;
  }
  return img;
}

ScanVolume read_scan(const std::filesystem::path& path, int frame) {
  const NiftiImage img = read_nifti(path);
  if (frame < 0 || frame >= img.frames)
    throw std::runtime_error("frame " + std::to_string(frame) + " out of range in " + path.string());
  ScanVolume v(img.shape, img.spacing);
  const std::size_t n = v.size();
  std::copy_n(img.data.begin() + static_cast<std::ptrdiff_t>(n * frame), n, v.voxels.begin());
  return v;
}

LabelVolume read_labels(const std::filesystem::path& path) {
  const NiftiImage img = read_nifti(path);
  LabelVolume v(img.shape, img.spacing);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float f = img.data[i];
    if (f != std::round(f) || f < 0.0f || f >= static_cast<float>(kNumClasses))
      throw std::runtime_error("label value " + std::to_string(f) + " outside {0,1,2,3} in " +
                               path.string());
    v.voxels[i] = static_cast<std::uint8_t>(f);
  }
  return v;
}

void write_scan(const std::filesystem::path& path, const ScanVolume& volume,
                const std::optional<NiftiHeader>& header_template) {
  NiftiHeader h = output_header(volume.shape, volume.spacing, header_template);
  h.set_datatype(16, 32);
  write_all(path, serialize(h, volume.voxels.data(), volume.voxels.size() * sizeof(float)));
}

void write_labels(const std::filesystem::path& path, const LabelVolume& labels,
                  const std::optional<NiftiHeader>& header_template) {
  NiftiHeader h = output_header(labels.shape, labels.spacing, header_template);
  h.set_datatype(2, 8);
  write_all(path, serialize(h, labels.voxels.data(), labels.voxels.size()));
}

}  // namespace cmrseg
