#include <catch2/catch_amalgamated.hpp>
#include "sfuda/sfuda.hpp"
