fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(courtgrid::cli::dispatch(&args));
}
