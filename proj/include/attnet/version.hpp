#ifndef ATTNET_VERSION_HPP_
#define ATTNET_VERSION_HPP_

namespace attnet {

inline constexpr const char* kToolVersion = "attnet 0.1.0";

}  // namespace attnet

#endif  // ATTNET_VERSION_HPP_
