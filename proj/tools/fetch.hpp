#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace kanmix::fetch {

struct Archive {
  std::string file;  // name under the mirror URL
  std::string md5;
  // Where the decoded output goes, relative to the data directory. For .gz
  // files this is the decompressed file; for .tar.gz archives the directory
  // the archive is unpacked into.
  std::string target;
  bool tar = false;
};

struct Source {
  std::string dataset;
  std::string base_url;
  std::vector<Archive> archives;
  std::vector<std::string> marker_files;  // present once the dataset is installed
};

const std::vector<Source>& sources();
const Source& source(const std::string& dataset);

std::string md5_file(const std::filesystem::path& path);

/// Downloads any URL libcurl understands, including file://.
void download(const std::string& url, const std::filesystem::path& dest);

void gunzip(const std::filesystem::path& src, const std::filesystem::path& dest);

/// Unpacks a gzip-compressed ustar archive. Returns the regular files written.
std::vector<std::filesystem::path> untar_gz(const std::filesystem::path& src,
                                            const std::filesystem::path& dest_dir);

struct FetchOptions {
  std::filesystem::path data_dir;
  std::string mirror;  // overrides Source::base_url when non-empty
  bool force = false;
  bool keep_archives = false;
};

/// Installs one dataset under data_dir. Returns false when it was already present.
bool fetch_dataset(const Source& src, const FetchOptions& opts);
bool fetch_dataset(const std::string& dataset, const FetchOptions& opts);

}  // namespace kanmix::fetch
