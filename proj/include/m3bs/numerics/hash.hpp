#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>

#include <openssl/evp.h>

#include "m3bs/errors.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::nn {

// SHA-256 over the shapes and raw value bytes of every tensor, in order.
class ParamHasher {
 public:
  ParamHasher() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  ~ParamHasher() { EVP_MD_CTX_free(ctx_); }
  ParamHasher(const ParamHasher&) = delete;
  ParamHasher& operator=(const ParamHasher&) = delete;

  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("SHA-256 update failed");
  }

  template <typename T>
  void add(const Tensor<T>& t) {
    for (auto d : t.shape()) {
      const auto v = static_cast<std::uint64_t>(d);
      update(&v, sizeof v);
    }
    update(t.data().data(), t.numel() * sizeof(T));
  }

  std::string hex() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, out, &len) != 1) throw Error("SHA-256 final failed");
    std::ostringstream s;
    for (unsigned i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(out[i]);
    return s.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

template <typename T>
std::string hash_params(const ParamList<T>& params) {
  ParamHasher h;
  for (const auto* p : params) h.add(*p);
  return h.hex();
}

}  // namespace m3bs::nn
