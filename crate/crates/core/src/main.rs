fn main() {
    std::process::exit(multistratum::cli::run(std::env::args_os()));
}
