#include "fetch.hpp"

#include <curl/curl.h>
#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>

#include "kanmix/errors.hpp"

namespace kanmix::fetch {

namespace fs = std::filesystem;

const std::vector<Source>& sources() {
  static const std::vector<Source> all = {
      {"mnist",
       "https://ossci-datasets.s3.amazonaws.com/mnist/",
       {{"train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873", "mnist/train-images-idx3-ubyte"},
        {"train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432", "mnist/train-labels-idx1-ubyte"},
        {"t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3", "mnist/t10k-images-idx3-ubyte"},
        {"t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c", "mnist/t10k-labels-idx1-ubyte"}},
       {"mnist/train-images-idx3-ubyte", "mnist/train-labels-idx1-ubyte",
        "mnist/t10k-images-idx3-ubyte", "mnist/t10k-labels-idx1-ubyte"}},
      {"cifar10",
       "https://www.cs.toronto.edu/~kriz/",
       {{"cifar-10-binary.tar.gz", "c32a1d4ab5d03f1284b67883e8d87530", ".", true}},
       {"cifar-10-batches-bin/data_batch_1.bin", "cifar-10-batches-bin/data_batch_5.bin",
        "cifar-10-batches-bin/test_batch.bin"}},
      {"cifar100",
       "https://www.cs.toronto.edu/~kriz/",
       {{"cifar-100-binary.tar.gz", "03b5dce01913d631647c71ecec9e9cb8", ".", true}},
       {"cifar-100-binary/train.bin", "cifar-100-binary/test.bin"}},
  };
  return all;
}

const Source& source(const std::string& dataset) {
  for (const auto& s : sources()) {
    if (s.dataset == dataset) return s;
  }
  throw ConfigError("unknown dataset '" + dataset + "'");
}

std::string md5_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_md5(), nullptr) != 1) {
    throw Error("md5 digest unavailable");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  std::string hex;
  char tmp[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(tmp, sizeof tmp, "%02x", md[i]);
    hex += tmp;
  }
  return hex;
}

namespace {

std::size_t write_cb(char* ptr, std::size_t size, std::size_t n, void* user) {
  auto* out = static_cast<std::ofstream*>(user);
  out->write(ptr, static_cast<std::streamsize>(size * n));
  return *out ? size * n : 0;
}

struct GzFile {
  gzFile f;
  explicit GzFile(const fs::path& p) : f(gzopen(p.c_str(), "rb")) {
    if (!f) throw FileError("cannot open " + p.string());
  }
  ~GzFile() { gzclose(f); }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  // Reads up to n bytes; throws on a corrupt stream.
  std::size_t read(void* dst, std::size_t n) {
    const int got = gzread(f, dst, static_cast<unsigned>(n));
    int code = Z_OK;
    const char* msg = gzerror(f, &code);
    if (code == Z_BUF_ERROR) throw TruncatedFile(std::string("truncated gzip stream: ") + msg);
    if (got < 0 || (code != Z_OK && code != Z_STREAM_END)) {
      throw BadMagic(std::string("corrupt gzip stream: ") + msg);
    }
    return static_cast<std::size_t>(got);
  }

  void read_exact(void* dst, std::size_t n, const std::string& what) {
    if (read(dst, n) != n) throw TruncatedFile("truncated archive while reading " + what);
  }
};

std::uint64_t parse_octal(const char* field, std::size_t len) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < len && field[i]; ++i) {
    if (field[i] == ' ') continue;
    if (field[i] < '0' || field[i] > '7') throw BadMagic("bad octal field in tar header");
    v = v * 8 + static_cast<std::uint64_t>(field[i] - '0');
  }
  return v;
}

std::string cstr(const char* field, std::size_t len) {
  return std::string(field, strnlen(field, len));
}

fs::path safe_join(const fs::path& root, const std::string& name) {
  const fs::path rel = fs::path(name).lexically_normal();
  if (rel.is_absolute() || rel.empty() || *rel.begin() == "..") {
    throw BadMagic("refusing to extract unsafe path '" + name + "'");
  }
  return root / rel;
}

}  // namespace

void download(const std::string& url, const fs::path& dest) {
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  fs::path tmp = dest;
  tmp += ".part";
  std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write " + tmp.string());

  std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), curl_easy_cleanup);
  if (!curl) throw Error("curl initialization failed");
  char err[CURL_ERROR_SIZE] = {};
  curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, write_cb);
  curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, &out);
  curl_easy_setopt(curl.get(), CURLOPT_ERRORBUFFER, err);
  const CURLcode rc = curl_easy_perform(curl.get());
  out.close();
  if (rc != CURLE_OK) {
    fs::remove(tmp);
    throw FileError("download of " + url + " failed: " + (err[0] ? err : curl_easy_strerror(rc)));
  }
  fs::rename(tmp, dest);
}

void gunzip(const fs::path& src, const fs::path& dest) {
  GzFile in(src);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  fs::path tmp = dest;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write " + tmp.string());
    std::vector<char> buf(1 << 16);
    while (const std::size_t n = in.read(buf.data(), buf.size())) {
      out.write(buf.data(), static_cast<std::streamsize>(n));
    }
    if (!out) throw FileError("short write to " + tmp.string());
  }
  fs::rename(tmp, dest);
}

std::vector<fs::path> untar_gz(const fs::path& src, const fs::path& dest_dir) {
  GzFile in(src);
  std::vector<fs::path> written;
  std::array<char, 512> block{};
  std::string long_name;
  std::vector<char> buf(1 << 16);

  while (true) {
    const std::size_t got = in.read(block.data(), block.size());
    if (got == 0) break;
    if (got != block.size()) throw TruncatedFile("truncated tar header in " + src.string());
    if (std::all_of(block.begin(), block.end(), [](char c) { return c == 0; })) break;

    const char* h = block.data();
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < 512; ++i) {
      sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    }
    if (sum != parse_octal(h + 148, 8)) throw BadMagic("tar header checksum mismatch in " + src.string());

    std::string name = cstr(h, 100);
    const std::string prefix = std::memcmp(h + 257, "ustar\0", 6) == 0 ? cstr(h + 345, 155) : "";
    if (!prefix.empty()) name = prefix + "/" + name;
    if (!long_name.empty()) {
      name = long_name;
      long_name.clear();
    }
    const std::uint64_t size = parse_octal(h + 124, 12);
    const std::uint64_t padded = (size + 511) / 512 * 512;
    const char type = h[156];

    if (type == 'L') {
      std::vector<char> data(padded);
      in.read_exact(data.data(), padded, "long name");
      long_name = cstr(data.data(), size);
      continue;
    }
    if (type == '5') {
      fs::create_directories(safe_join(dest_dir, name));
      continue;
    }
    if (type == '0' || type == '\0') {
      const fs::path out_path = safe_join(dest_dir, name);
      fs::create_directories(out_path.parent_path());
      std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
      if (!out) throw FileError("cannot write " + out_path.string());
      std::uint64_t left = size;
      while (left > 0) {
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(left, buf.size()));
        in.read_exact(buf.data(), n, name);
        out.write(buf.data(), static_cast<std::streamsize>(n));
        left -= n;
      }
      if (padded > size) in.read_exact(buf.data(), padded - size, name);
      written.push_back(out_path);
      continue;
    }
    // Links, pax headers and other entry types carry no file content we need.
    for (std::uint64_t left = padded; left > 0;) {
      const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(left, buf.size()));
      in.read_exact(buf.data(), n, name);
      left -= n;
    }
  }
  return written;
}

bool fetch_dataset(const std::string& dataset, const FetchOptions& opts) {
  return fetch_dataset(source(dataset), opts);
}

bool fetch_dataset(const Source& src, const FetchOptions& opts) {
  auto installed = [&] {
    for (const auto& m : src.marker_files) {
      if (!fs::exists(opts.data_dir / m)) return false;
    }
    return true;
  };
  if (!opts.force && installed()) return false;

  std::string base = opts.mirror.empty() ? src.base_url : opts.mirror;
  if (!base.empty() && base.back() != '/') base += '/';
  const fs::path download_dir = opts.data_dir / "downloads";

  for (const auto& a : src.archives) {
    const fs::path archive = download_dir / a.file;
    if (opts.force || !fs::exists(archive) || md5_file(archive) != a.md5) {
      std::cerr << "downloading " << base + a.file << "\n";
      download(base + a.file, archive);
    }
    const std::string digest = md5_file(archive);
    if (digest != a.md5) {
      throw BadMagic("checksum mismatch for " + a.file + ": expected " + a.md5 + ", got " + digest);
    }
    if (a.tar) {
      untar_gz(archive, opts.data_dir / a.target);
    } else {
      gunzip(archive, opts.data_dir / a.target);
    }
    if (!opts.keep_archives) fs::remove(archive);
  }
  std::error_code ec;
  fs::remove(download_dir, ec);  // only succeeds when empty
  if (!installed()) throw CountMismatch(src.dataset + ": archive did not contain the expected files");
  return true;
}

}  // namespace kanmix::fetch
