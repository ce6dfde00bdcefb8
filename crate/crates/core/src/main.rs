fn main() {
    std::process::exit(msc_nmt::cli::main());
}
