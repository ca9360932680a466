mod common;

use std::collections::BTreeMap;

use common::{data_path, read_data};
use covbridge::cov_ingest::{parse_cov_line, DocId};
use covbridge::export_map::{
    build_3d, map_frame, read_point_order, select_time, BimRegistry, Slot, SummaryCsv, DEFAULT_SENTINEL,
};
use covbridge::point_model::{format_name, parse_network_name, parse_system_name, LookupTable};
use md5_oracle::compute;

fn ahu_registry() -> BimRegistry {
    let mut reg = BimRegistry::load_seed(data_path("ahu_registry.json")).unwrap();
    reg.apply_spatial_table(std::fs::File::open(data_path("ahu_spatial.csv")).unwrap())
        .unwrap();
    reg
}

fn ahu_csv() -> SummaryCsv {
    SummaryCsv::load(data_path("summary_avg_hourly.csv")).unwrap()
}

#[test]
fn lookup_rows_resolve() {
    let table = LookupTable::load(data_path("lookup_rows.csv")).unwrap();
    assert_eq!(table.len(), 3);
    let text = read_data("lookup_rows.csv");
    for row in text.lines().skip(1) {
        let (net, sys) = row.split_once(',').unwrap();
        let resolved = table.resolve(&parse_network_name(net).unwrap()).unwrap();
        assert_eq!(resolved.to_string(), sys);
        assert_eq!(resolved.equipment(), "DCC.RM.DCC01-13");
        assert!(resolved.is_room_hosted());
    }
}

#[test]
fn raw_event_names() {
    let text = read_data("raw_network_names.txt");
    let mut rejected = Vec::new();
    for name in text.lines() {
        match parse_network_name(name) {
            Ok(n) => assert_eq!(format_name(&n), name),
            Err(_) => rejected.push(name),
        }
    }
    // two segments after the slash; this one is left for the lint report
    assert_eq!(rejected, ["DCCIAE-2B/FCB-HTN-20.AI-1"]);

    let carma = parse_network_name("DCCIAE-01/CARMA L1 BACnet IP1.CARMA METER - EHP6.Analog Values.AV-115").unwrap();
    assert_eq!(carma.trunk_id(), "CARMA L1 BACnet IP1");
    assert_eq!(carma.field_controller_id(), "CARMA METER - EHP6.Analog Values");
    assert_eq!(carma.point_type(), "AV-115");
}

#[test]
fn streamed_lines_parse_and_hash() {
    for line in read_data("cov_lines.txt").lines() {
        let event = parse_cov_line(line).unwrap();
        assert_eq!(event.canonical_line(), line);
        let oracle = format!("{:x}", compute(line.as_bytes()));
        assert_eq!(event.doc_id.to_string(), oracle);
        assert_eq!(oracle.parse::<DocId>().unwrap(), event.doc_id);
    }
    let first = parse_cov_line(read_data("cov_lines.txt").lines().next().unwrap()).unwrap();
    assert_eq!(first.device_id, "DCCNCE-20");
    assert_eq!(first.value, 612385.0);
    assert_eq!(first.timestamp.offset().local_minus_utc(), -5 * 3600);
}

#[test]
fn nested_list_layout() {
    let reg = ahu_registry();
    let nested = build_3d(&ahu_csv(), &reg.order()).unwrap();
    assert_eq!(nested.element_ids, [38526, 31429, 43512]);
    assert_eq!(nested.data.len(), 3);
    assert!(nested
        .data
        .iter()
        .all(|rows| rows.len() == 3 && rows.iter().all(|r| r.len() == 4)));
    let column = |element: usize, slot: usize| -> Vec<f64> {
        nested.data[element]
            .iter()
            .map(|row| row[slot].value().unwrap())
            .collect()
    };
    assert_eq!(column(0, 1), [0.23, 0.5, 0.22]);
    assert_eq!(column(0, 2), [22.3, 23.3, 23.8]);
    assert_eq!(column(1, 1), [0.7, 0.8, 1.1]);
    assert_eq!(nested.data[0][1][0], Slot::Time("2019-05-24 16:00:00".into()));
}

#[test]
fn selected_row_maps_onto_elements() {
    let mut reg = ahu_registry();
    let nested = build_3d(&ahu_csv(), &reg.order()).unwrap();

    let newest = select_time(&nested, 0).unwrap();
    assert_eq!((newest[0][0], newest[1][0], newest[0][1]), (0.23, 22.3, 0.7));

    // selection returns the row as stored: the 16:00 SAT is 23.3
    let frame = select_time(&nested, 1).unwrap();
    assert_eq!(frame.len(), 3);
    assert_eq!((frame[0][0], frame[1][0], frame[0][1]), (0.5, 23.3, 0.8));

    let order = read_point_order(data_path("summary_avg_hourly.points")).unwrap();
    let report = map_frame(&frame, &order, &mut reg, DEFAULT_SENTINEL).unwrap();
    assert_eq!(report.written, 9);
    // AHU1's third point and all of AHU3 are placeholders
    assert_eq!(report.skipped.len(), 4);
    let params = |id: i64| -> BTreeMap<String, f64> { reg.get(id).unwrap().parameters.clone() };
    assert_eq!(params(38526)["SAH"], 0.5);
    assert_eq!(params(38526)["SAT"], 23.3);
    assert_eq!(params(31429)["SAH"], 0.8);
    assert_eq!(reg.get(38526).unwrap().spatial_ref.as_deref(), Some("ARC-M101"));

    let snapshot = reg.snapshot_model();
    assert!(snapshot.contains(r#""element_id":38526"#));
    assert!(snapshot.contains(r#""SAT":23.3"#));
    assert_eq!(reg.snapshot_model(), snapshot);
}

#[test]
fn column_order_in_file_does_not_matter() {
    let csv = ahu_csv();
    let mut shuffled = csv.clone();
    let perm = [2, 0, 1];
    shuffled.columns = perm.iter().map(|&i| csv.columns[i].clone()).collect();
    for (row, orig) in shuffled.rows.iter_mut().zip(&csv.rows) {
        row.cells = perm.iter().map(|&i| orig.cells[i].clone()).collect();
    }
    let order = ahu_registry().order();
    assert_eq!(build_3d(&shuffled, &order).unwrap(), build_3d(&csv, &order).unwrap());
}

#[test]
fn known_system_names() {
    for name in ["ARC.AIR.AHU1.SAT", "DCC.RM.DCC01-13.EFF-OCC", "ARC.AIR.AHU2.SAH"] {
        let parsed = parse_system_name(name).unwrap();
        assert_eq!(parsed.to_string(), name);
    }
    assert!(parse_system_name("ARC.AIR.AHU1").is_err());
    assert!(parse_system_name("ARC.AIR.AHU1.SAT.X").is_err());
}
