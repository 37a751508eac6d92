fn main() {
    std::process::exit(mesh_imitate::cli::run(std::env::args_os()));
}
