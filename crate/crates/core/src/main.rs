fn main() {
    std::process::exit(gainrl::run_cli());
}
