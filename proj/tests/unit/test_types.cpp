#include "doctest.h"
#include "tribe/types.hpp"

using namespace tribe;

TEST_CASE("round_half_even breaks ties to the even neighbour") {
    CHECK(round_half_even(0.5) == 0.0);
    CHECK(round_half_even(1.5) == 2.0);
    CHECK(round_half_even(2.5) == 2.0);
    CHECK(round_half_even(4.5) == 4.0);
    CHECK(round_half_even(-1.5) == -2.0);
    CHECK(round_half_even(-2.5) == -2.0);
    CHECK(round_half_even(2.4) == 2.0);
    CHECK(round_half_even(2.6) == 3.0);
    CHECK(round_index(149.0 * 2.0) == 298);
}

TEST_CASE("modality masks parse and describe the visible set") {
    CHECK(ModalityMask::keep_only("none") == ModalityMask::none());
    CHECK(ModalityMask::keep_only("text").describe() == "text");
    const auto ta = ModalityMask::keep_only("text+audio");
    CHECK(!ta[Modality::text]);
    CHECK(!ta[Modality::audio]);
    CHECK(ta[Modality::video]);
    CHECK(ta.num_unmasked() == 2);
    CHECK(ModalityMask::keep_only("text+audio+video") == ModalityMask::none());
    CHECK(ModalityMask::solo(Modality::video).describe() == "video");
    CHECK_THROWS_AS(ModalityMask::keep_only("smell"), std::invalid_argument);

    for (int bits = 1; bits < 8; ++bits) {
        ModalityMask m;
        for (int i = 0; i < kNumModalities; ++i) m.masked[i] = !(bits & (1 << i));
        CHECK(ModalityMask::keep_only(m.describe()) == m);
    }
    ModalityMask all;
    all.masked = {true, true, true};
    CHECK(!all.valid());
}
