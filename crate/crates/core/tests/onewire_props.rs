mod support;

use std::collections::BTreeSet;

use envmon::onewire::*;
use proptest::prelude::*;
use support::crc8_bitwise;

#[test]
fn crc_known_vectors() {
    // ROM from the Maxim application note
    let rom = [0x02, 0x1C, 0xB8, 0x01, 0x00, 0x00, 0x00];
    assert_eq!(crc8(&rom), 0xA2);
    assert_eq!(crc8(&[]), 0);
    assert_eq!(crc8(b"123456789"), 0xA1);
}

#[test]
fn crc_matches_bitwise_on_every_single_byte() {
    for b in 0..=255u8 {
        assert_eq!(crc8(&[b]), crc8_bitwise(&[b]));
    }
}

#[test]
fn scratchpad_frames_check_out() {
    for t in [-55 * 16, -1, 0, 1, 25 * 16 + 1, 85 * 16, 125 * 16] {
        let frame = scratchpad_frame(t);
        assert_eq!(crc8(&frame), 0);
        assert_eq!(decode_scratchpad(&frame), Some(t));
    }
}

#[test]
fn bus_health_examples() {
    let h = bus_health(&BusTopology { radius_m: 10.0, n_sensors: 15, n_splitters: 0 });
    assert!((h.recovery_time_us - 93.0).abs() < 1e-9);
    assert!(h.discovery_reliable);
    let h = bus_health(&BusTopology { radius_m: 50.0, n_sensors: 15, n_splitters: 0 });
    assert!((h.recovery_time_us - 45.0).abs() < 1e-9);
    assert!(!h.discovery_reliable);
    assert!(h.reads_ok());
}

fn serials_with_shared_prefixes() -> impl Strategy<Value = BTreeSet<u64>> {
    // a few base serials, each with many neighbours differing in low bits,
    // so the search has to branch deep into the tree
    (proptest::collection::vec(0u64..(1 << 48), 1..6), proptest::collection::vec((0usize..6, 0u64..256), 0..60))
        .prop_map(|(bases, offs)| {
            let mut set: BTreeSet<u64> = bases.iter().copied().collect();
            for (b, o) in offs {
                set.insert((bases[b % bases.len()] ^ o) & 0xFFFF_FFFF_FFFF);
            }
            set
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn crc_table_matches_bitwise(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(crc8(&bytes), crc8_bitwise(&bytes));
    }

    #[test]
    fn rom_code_is_self_checking(family in any::<u8>(), serial in 0u64..(1 << 48), flip in 0u32..64) {
        let rom = RomCode::new(family, serial).unwrap();
        prop_assert_eq!(crc8(&rom.to_bytes()), 0);
        prop_assert_eq!(crc8_bitwise(&rom.to_bytes()[..7]), rom.crc());
        prop_assert_eq!((rom.family(), rom.serial()), (family, serial));
        prop_assert_eq!(RomCode::from_u64(rom.as_u64()), Ok(rom));
        // any single-bit error is caught
        prop_assert!(RomCode::from_u64(rom.as_u64() ^ (1 << flip)).is_err());
    }

    #[test]
    fn scratchpad_roundtrip(t in any::<i16>(), byte in 0usize..9, bit in 0u8..8) {
        let frame = scratchpad_frame(t);
        prop_assert_eq!(decode_scratchpad(&frame), Some(t));
        let mut bad = frame;
        bad[byte] ^= 1 << bit;
        prop_assert_eq!(decode_scratchpad(&bad), None);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn search_finds_exactly_the_installed_set(serials in serials_with_shared_prefixes(), seed in any::<u64>()) {
        let mut bus = OneWireBus::new(0.0, 0, seed);
        let mut expected = Vec::new();
        for s in &serials {
            let rom = RomCode::new(FAMILY_DS18B20, *s).unwrap();
            bus.install(rom).unwrap();
            expected.push(rom);
        }
        expected.sort_unstable();
        prop_assume!(bus.health().discovery_reliable);
        prop_assert_eq!(bus.search_rom(), expected.clone());
        // and again: the search is stateless between passes
        prop_assert_eq!(bus.search_rom(), expected);
    }

    #[test]
    fn overloaded_bus_only_loses_devices(serials in serials_with_shared_prefixes(), seed in any::<u64>()) {
        let mut bus = OneWireBus::new(60.0, 2, seed);
        for s in &serials {
            bus.install(RomCode::new(FAMILY_DS18B20, *s).unwrap()).unwrap();
        }
        let installed: BTreeSet<RomCode> = bus.installed().collect();
        for _ in 0..5 {
            let found = bus.search_rom();
            prop_assert!(found.iter().all(|r| installed.contains(r)));
            prop_assert!(found.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
