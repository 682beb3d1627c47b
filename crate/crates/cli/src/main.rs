use clap::Parser;

#[derive(Parser)]
#[command(name = "acsseg", version, about = "Tri-planar volumetric segmentation")]
struct Args {}

fn main() {
    let _ = Args::parse();
}
