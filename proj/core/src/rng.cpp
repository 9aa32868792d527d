#include "spotdiff/rng.hpp"

#include <sstream>

#include "spotdiff/error.hpp"

namespace spotdiff {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw InputError("malformed rng state");
}

}  // namespace spotdiff
