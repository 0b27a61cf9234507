fn main() {
    std::process::exit(mtd_core::cli::run(std::env::args_os()));
}
