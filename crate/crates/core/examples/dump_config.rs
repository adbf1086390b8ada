use twinloop_core::aml::parse_caex;
use twinloop_core::plant::{extract_plant_config, serialize_config, RoleMapping};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures/demo_plant.aml".into());
    let xml = std::fs::read_to_string(&path).expect("read AML file");
    let doc = parse_caex(&xml).expect("parse");
    match extract_plant_config(&doc, &RoleMapping::default()) {
        Ok(x) => {
            print!("{}", serialize_config(&x.config));
            for w in &x.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("{:?}", x.accounting);
        }
        Err(e) => eprintln!("error: {e}"),
    }
}
