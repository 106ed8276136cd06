fn main() {
    std::process::exit(hcflow::cli_main());
}
