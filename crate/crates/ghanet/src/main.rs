fn main() {
    std::process::exit(ghanet::cli::run(std::env::args_os()));
}
