//! Command-line entry points (scaffolding; filled in with the pipeline).

pub fn run(args: Vec<String>) -> i32 {
    eprintln!("not yet implemented: {args:?}");
    1
}
