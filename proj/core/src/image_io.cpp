#include "fot/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>

namespace fot {

namespace fs = std::filesystem;

bool has_image_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  static const char* kExts[] = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff"};
  for (const char* e : kExts)
    if (ext == e) return true;
  return false;
}

Tensor load_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) fail("cannot decode image: " + path.string());
  const int H = bgr.rows, W = bgr.cols;
  Tensor out({3, H, W});
  for (int y = 0; y < H; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x) {
      // BGR -> RGB
      out.at(0, y, x) = row[x][2] / 255.0;
      out.at(1, y, x) = row[x][1] / 255.0;
      out.at(2, y, x) = row[x][0] / 255.0;
    }
  }
  return out;
}

namespace {
unsigned char to_byte(double v) {
  v = std::min(1.0, std::max(0.0, v));
  const int q = static_cast<int>(v * 255.0 + 0.5);
  return static_cast<unsigned char>(std::min(255, q));
}
}  // namespace

void save_image(const fs::path& path, const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) fail("save_image expects a (3,H,W) tensor");
  const int H = chw.dim(1), W = chw.dim(2);
  cv::Mat bgr(H, W, CV_8UC3);
  for (int y = 0; y < H; ++y) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x) {
      row[x][2] = to_byte(chw.at(0, y, x));
      row[x][1] = to_byte(chw.at(1, y, x));
      row[x][0] = to_byte(chw.at(2, y, x));
    }
  }
  fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) fail("cannot write image: " + path.string());
}

Tensor load_gray(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) fail("cannot decode grayscale image: " + path.string());
  const int H = gray.rows, W = gray.cols;
  Tensor out({1, H, W});
  for (int y = 0; y < H; ++y) {
    const unsigned char* row = gray.ptr<unsigned char>(y);
    for (int x = 0; x < W; ++x) out.at(0, y, x) = row[x] / 255.0;
  }
  return out;
}

void save_gray_atomic(const fs::path& path, const Tensor& map_1hw) {
  if (map_1hw.rank() != 3 || map_1hw.dim(0) != 1) fail("save_gray_atomic expects a (1,H,W) tensor");
  const int H = map_1hw.dim(1), W = map_1hw.dim(2);
  cv::Mat gray(H, W, CV_8UC1);
  for (int y = 0; y < H; ++y) {
    unsigned char* row = gray.ptr<unsigned char>(y);
    for (int x = 0; x < W; ++x) row[x] = to_byte(map_1hw.at(0, y, x));
  }
  fs::create_directories(path.parent_path());
  // keep the extension so the encoder is picked correctly
  fs::path tmp = path.parent_path() / (".tmp_" + path.filename().string());
  if (!cv::imwrite(tmp.string(), gray)) fail("cannot write image: " + tmp.string());
  fs::rename(tmp, path);
}

}  // namespace fot
