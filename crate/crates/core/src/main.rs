fn main() {
    std::process::exit(mpmri_core::cli::run(std::env::args_os()));
}
