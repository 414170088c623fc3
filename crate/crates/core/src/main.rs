fn main() {
    std::process::exit(swiftq::cli::main(std::env::args_os()));
}
