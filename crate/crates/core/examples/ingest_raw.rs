//! Parses raw loop and probe rows against a site map and aggregates them to
//! 15-minute samples.

use ramp_transfer::domain::{Period, SiteMap};
use ramp_transfer::ingest::{aggregate, parse_loop_csv, parse_probe_csv, AggregateConfig};

const SITE: &str = r#"{
  "sections": [{
    "section_id": "312",
    "station_id": 312,
    "positions": {
      "upstream": {"lanes": 1, "length_miles": 0.72, "slots": [33], "probe_segment_ids": ["1226240265"]},
      "onramp": {"lanes": 1, "length_miles": 0.26, "slots": [1], "probe_segment_ids": ["1226240266"]},
      "downstream": {"lanes": 1, "length_miles": 0.27, "slots": [41], "probe_segment_ids": ["1226240267"]}
    },
    "excluded_slots": [9]
  }]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let map = SiteMap::from_json_str(SITE)?;
    let loops = "ID,TimeStamp,DetectorstationID,SlotNumber,Volume,Speed,Occupancy\n\
                 853115071,6/11/2019 6:00,312,33,8,66,12\n\
                 853115072,6/11/2019 6:00,312,9,4,0,4\n\
                 853115073,6/11/2019 6:00,312,33,x,66,12\n\
                 853115074,6/11/2019 6:00:20,312,33,6,64,10\n";
    let probes = "timestamp,SegmentID,type,speed,average,reference,score,confidenceValue,travelTimeMinutes\n\
                  6/11/2019 6:07,1226240265,XDS,50,63,63,30,32,0.49\n\
                  6/11/2019 6:08,1226240265,XDS,54,63,63,30,32,0.45\n";
    let (l, lskip) = parse_loop_csv(loops.as_bytes(), &map)?;
    let (p, pskip) = parse_probe_csv(probes.as_bytes(), &map)?;
    println!("{} loop records, {} probe records", l.len(), p.len());
    for row in lskip.rows.iter().chain(&pskip.rows) {
        println!("  skipped line {}: {:?}", row.line, row.reason);
    }
    let cfg = AggregateConfig { min_loop_coverage: 0.0, min_probe_minutes: 0, ..AggregateConfig::default() };
    let out = aggregate(&l, &p, &map, Period::Before, &cfg);
    for s in &out.samples {
        println!(
            "  {} {:?} {:?}: speed {:.1}, flow {:.1}, occupancy {:.2}",
            s.section.as_str(),
            s.position,
            s.key,
            s.mean_speed,
            s.flow_rate,
            s.occupancy
        );
    }
    Ok(())
}
