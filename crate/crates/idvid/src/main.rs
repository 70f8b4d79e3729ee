fn main() {
    std::process::exit(idvid::cli_main());
}
