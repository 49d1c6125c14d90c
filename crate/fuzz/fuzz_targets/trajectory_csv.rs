#![no_main]

use libfuzzer_sys::fuzz_target;
use wdn_dae::trajectory::TrajectoryTable;

fuzz_target!(|data: &[u8]| {
    let Ok(table) = TrajectoryTable::read_csv(data) else {
        return;
    };
    let again = TrajectoryTable::parse_csv(&table.to_csv_string()).expect("written CSV parses");
    assert_eq!(again.columns, table.columns);
    assert_eq!(again.len(), table.len());
    if let Some(&t) = table.times.first() {
        let _ = table.interpolate(t);
    }
});
