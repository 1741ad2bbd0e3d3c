use clap::Parser;
use pilotkit::harness::emulator::EmulatorArgs;

fn main() {
    let args = EmulatorArgs::parse();
    if let Err(e) = args.check() {
        eprintln!("pilotkit-emulate: {e}");
        std::process::exit(2);
    }
    std::process::exit(args.run());
}
